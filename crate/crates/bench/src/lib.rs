//! Fixtures shared by the benchmarks: the benchmark scene, an initialized
//! field and a deterministic ray batch.

use lmf_core::losses::RayTarget;
use lmf_core::pipeline::Benchmark;
use lmf_core::{LayeredFieldParams, RunConfig};

pub struct Fixture {
    pub cfg: RunConfig,
    pub bench: Benchmark,
    pub params: LayeredFieldParams,
}

impl Fixture {
    pub fn new() -> Self {
        let cfg = RunConfig::bench();
        let bench = Benchmark::generate(&cfg).expect("benchmark scene");
        let params = LayeredFieldParams::init(bench.field_config(), cfg.seed).expect("init");
        Fixture { cfg, bench, params }
    }

    /// `n` rays spread over frames and pixels on a fixed stride.
    pub fn batch(&self, n: usize) -> Vec<RayTarget> {
        let frames = self.bench.gt.rgb.len();
        (0..n)
            .map(|i| {
                let t = (i * 7) % frames;
                let img = &self.bench.gt.rgb[t];
                let (x, y) = ((i * 13) % img.width, (i * 29 + i / 64) % img.height);
                RayTarget {
                    frame: t,
                    pixel: (x as f64 + 0.5, y as f64 + 0.5),
                    color: img.get(x, y),
                    mask: Some(self.bench.pseudo[t].values.get(x, y)),
                }
            })
            .collect()
    }
}

impl Default for Fixture {
    fn default() -> Self {
        Self::new()
    }
}

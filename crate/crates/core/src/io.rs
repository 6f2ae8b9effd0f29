//! On-disk formats: binary PPM/PGM images, raw little-endian `f64` dumps,
//! camera CSV, training-log CSV and the parameter checkpoint container.
//!
//! A checkpoint is `LMF1`, a length-prefixed text header describing the
//! [`FieldConfig`], the parameter count and values as little-endian `f64`,
//! and a trailing SHA-256 of everything before it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fields::{Activation, CodeMode, FieldConfig, Frustum, LayeredFieldParams};
use crate::geometry::{Aabb, CameraPose, Intrinsics, Mat3, Vec3};
use crate::image::{BinaryMask, GrayImage, RgbImage};
use crate::trainer::LogRow;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LMF1";

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read(path)?).map_err(|_| Error::format(path, "not valid UTF-8"))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(read(path)?)))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_netpbm(path: &Path, magic: &str, width: usize, height: usize, body: &[u8]) -> Result<()> {
    let mut bytes = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(body);
    fs::write(path, bytes)?;
    Ok(())
}

/// Parses a binary PPM or PGM with maxval 255; returns size and raw body.
fn read_netpbm(path: &Path, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read(path)?;
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the body.
    pos += 1;
    if tokens[0] != magic {
        return Err(Error::format(path, format!("expected {magic}, found `{}`", tokens[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad header field `{s}`")));
    let (w, h, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != w * h * channels {
        return Err(Error::format(
            path,
            format!("expected {} bytes of pixel data, found {}", w * h * channels, body.len()),
        ));
    }
    Ok((w, h, body.to_vec()))
}

/// 8-bit binary PPM; values are clamped to `[0, 1]`.
pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let body: Vec<u8> = img.data.iter().flat_map(|p| p.map(to_byte)).collect();
    write_netpbm(path, "P6", img.width, img.height, &body)
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let (width, height, body) = read_netpbm(path, "P6", 3)?;
    Ok(RgbImage {
        width,
        height,
        data: body
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]].map(|b| b as f64 / 255.0))
            .collect(),
    })
}

/// 8-bit binary PGM with a linear `[0, 1] -> [0, 255]` mapping.
pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let body: Vec<u8> = img.data.iter().map(|&v| to_byte(v)).collect();
    write_netpbm(path, "P5", img.width, img.height, &body)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let (width, height, body) = read_netpbm(path, "P5", 1)?;
    Ok(GrayImage {
        width,
        height,
        data: body.iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_pgm(path, &mask.to_gray())
}

/// Reads a PGM and labels pixels at or above mid-grey as positive.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let g = read_pgm(path)?;
    Ok(BinaryMask {
        width: g.width,
        height: g.height,
        data: g.data.iter().map(|&v| v >= 0.5).collect(),
    })
}

/// Uncertainty maps are stored as `B / 2` so typical values stay visible.
pub fn uncertainty_preview(b: &GrayImage) -> GrayImage {
    GrayImage {
        data: b.data.iter().map(|v| 0.5 * v).collect(),
        ..b.clone()
    }
}

pub fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let bytes = read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format(path, "length is not a multiple of 8"));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Full-precision gray image: raw values, shape taken from `width`.
pub fn read_gray_f64(path: &Path, width: usize, height: usize) -> Result<GrayImage> {
    let data = read_f64s(path)?;
    if data.len() != width * height {
        return Err(Error::format(path, format!("expected {} values, found {}", width * height, data.len())));
    }
    Ok(GrayImage { width, height, data })
}

pub const CAMERA_CSV_HEADER: &str = "frame,width,height,fx,fy,cx,cy,r00,r01,r02,r10,r11,r12,r20,r21,r22,t0,t1,t2";

/// One row per camera. Numbers use the shortest exact decimal form, so a
/// read-back reproduces every pose bit for bit.
pub fn write_cameras_csv(path: &Path, cameras: &[CameraPose]) -> Result<()> {
    let mut s = String::from(CAMERA_CSV_HEADER);
    s.push('\n');
    for c in cameras {
        let k = c.intrinsics();
        let r = c.rotation();
        let t = c.translation();
        write!(s, "{},{},{},{},{},{},{}", c.frame_index(), k.width, k.height, k.fx, k.fy, k.cx, k.cy).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                write!(s, ",{}", r[(i, j)]).unwrap();
            }
        }
        writeln!(s, ",{},{},{}", t.x, t.y, t.z).unwrap();
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_cameras_csv(path: &Path) -> Result<Vec<CameraPose>> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(CAMERA_CSV_HEADER) {
        return Err(Error::format(path, "unexpected header"));
    }
    let mut cams = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::format(path, format!("line {}: malformed row", n + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 19 {
            return Err(bad());
        }
        let int = |i: usize| f[i].parse::<usize>().map_err(|_| bad());
        let real = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        let intrinsics = Intrinsics {
            width: int(1)?,
            height: int(2)?,
            fx: real(3)?,
            fy: real(4)?,
            cx: real(5)?,
            cy: real(6)?,
        };
        let mut r = Mat3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                r[(i, j)] = real(7 + 3 * i + j)?;
            }
        }
        let t = Vec3::new(real(16)?, real(17)?, real(18)?);
        let pose = CameraPose::new(r, t, intrinsics, int(0)?)
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 2)))?;
        cams.push(pose);
    }
    if cams.iter().enumerate().any(|(i, c)| c.frame_index() != i) {
        return Err(Error::format(path, "frames must be numbered 0, 1, 2, ... in order"));
    }
    Ok(cams)
}

pub const LOG_CSV_HEADER: &str =
    "epoch,step,lr,l_rgb,l_pmf,l_nmf,l_total,grad_static,grad_semi,grad_dynamic,pixels,dynamic_pixels";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let p = &r.report;
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.step,
            r.lr,
            p.l_rgb,
            p.l_pmf,
            p.l_nmf,
            p.l_total,
            p.grad_norms[0],
            p.grad_norms[1],
            p.grad_norms[2],
            p.pixels,
            p.dynamic_pixels
        )
        .unwrap();
    }
    s
}

fn config_header(c: &FieldConfig) -> String {
    let v = |x: &Vec3| format!("{} {} {}", x.x, x.y, x.z);
    let r = |g: &[usize; 3]| format!("{} {} {}", g[0], g[1], g[2]);
    let f = &c.frustum;
    [
        format!("world_min {}", v(&c.world.min)),
        format!("world_max {}", v(&c.world.max)),
        format!("world_res {}", r(&c.world_res)),
        format!("shared_features {}", c.shared_features),
        format!("semi_res {}", r(&c.semi_res)),
        format!("frustum {} {} {} {}", f.tan_x, f.tan_y, f.near, f.far),
        format!("dyn_res {}", r(&c.dyn_res)),
        format!("basis_grids {}", c.basis_grids),
        format!("frames {}", c.frames),
        format!("code_rank {}", c.code_rank),
        format!("code_dim {}", c.code_dim),
        format!("code_mode {}", c.code_mode.name()),
        format!("activation {} {}", c.activation.beta_min, c.activation.density_gain),
    ]
    .join("\n")
}

fn parse_config_header(path: &Path, text: &str) -> Result<FieldConfig> {
    let bad = |m: String| Error::format(path, m);
    let mut fields = std::collections::HashMap::new();
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        let key = parts.next().ok_or_else(|| bad("empty header line".into()))?;
        fields.insert(key, parts.collect::<Vec<_>>());
    }
    let get = |k: &str, n: usize| -> Result<&Vec<&str>> {
        let f = fields.get(k).ok_or_else(|| bad(format!("header lacks `{k}`")))?;
        if f.len() != n {
            return Err(bad(format!("header field `{k}` has {} values, expected {n}", f.len())));
        }
        Ok(f)
    };
    let reals = |k: &str, n: usize| -> Result<Vec<f64>> {
        get(k, n)?
            .iter()
            .map(|s| s.parse().map_err(|_| bad(format!("header field `{k}`: bad number `{s}`"))))
            .collect()
    };
    let ints = |k: &str, n: usize| -> Result<Vec<usize>> {
        get(k, n)?
            .iter()
            .map(|s| s.parse().map_err(|_| bad(format!("header field `{k}`: bad integer `{s}`"))))
            .collect()
    };
    let res = |k: &str| -> Result<[usize; 3]> { Ok(ints(k, 3)?.try_into().unwrap()) };
    let vec3 = |k: &str| -> Result<Vec3> {
        let a = reals(k, 3)?;
        Ok(Vec3::new(a[0], a[1], a[2]))
    };
    let fr = reals("frustum", 4)?;
    let act = reals("activation", 2)?;
    let config = FieldConfig {
        world: Aabb::new(vec3("world_min")?, vec3("world_max")?),
        world_res: res("world_res")?,
        shared_features: ints("shared_features", 1)?[0],
        semi_res: res("semi_res")?,
        frustum: Frustum {
            tan_x: fr[0],
            tan_y: fr[1],
            near: fr[2],
            far: fr[3],
        },
        dyn_res: res("dyn_res")?,
        basis_grids: ints("basis_grids", 1)?[0],
        frames: ints("frames", 1)?[0],
        code_rank: ints("code_rank", 1)?[0],
        code_dim: ints("code_dim", 1)?[0],
        code_mode: CodeMode::parse(get("code_mode", 1)?[0]).map_err(|e| bad(e.to_string()))?,
        activation: Activation {
            beta_min: act[0],
            density_gain: act[1],
        },
    };
    Ok(config)
}

pub fn encode_checkpoint(params: &LayeredFieldParams) -> Vec<u8> {
    let header = config_header(params.config());
    let mut out = Vec::with_capacity(64 + header.len() + 8 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<LayeredFieldParams> {
    let bad = |m: &str| Error::format(path, m);
    if bytes.len() < 4 + 4 + 8 + 32 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let hlen = u32::from_le_bytes(body[4..8].try_into().unwrap()) as usize;
    let header = body.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header = std::str::from_utf8(header).map_err(|_| bad("header is not UTF-8"))?;
    let config = parse_config_header(path, header)?;
    let rest = &body[8 + hlen..];
    if rest.len() < 8 {
        return Err(bad("truncated parameter count"));
    }
    let n = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
    let data = &rest[8..];
    if data.len() != 8 * n {
        return Err(bad("parameter payload length does not match count"));
    }
    let values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LayeredFieldParams::from_parts(config, values).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_checkpoint(path: &Path, params: &LayeredFieldParams) -> Result<()> {
    fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LayeredFieldParams> {
    decode_checkpoint(path, &read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{tiny_cameras, tiny_scene_params};

    #[test]
    fn images_round_trip_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = RgbImage {
            width: 3,
            height: 2,
            data: (0..6).map(|i| [i as f64 / 5.0, 1.0 - i as f64 / 5.0, 0.5]).collect(),
        };
        let p = dir.path().join("a.ppm");
        write_ppm(&p, &rgb).unwrap();
        let back = read_ppm(&p).unwrap();
        assert_eq!((back.width, back.height), (3, 2));
        for (a, b) in rgb.data.iter().zip(&back.data) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }

        let mut mask = BinaryMask::empty(4, 3);
        mask.data[5] = true;
        let p = dir.path().join("m.pgm");
        write_mask(&p, &mask).unwrap();
        assert_eq!(read_mask(&p).unwrap(), mask);
        assert_eq!(read_pgm(&p).unwrap(), mask.to_gray());
        assert!(matches!(read_ppm(&p), Err(Error::Format { .. })));
        assert!(matches!(read_pgm(&dir.path().join("none.pgm")), Err(Error::Missing(_))));
    }

    #[test]
    fn netpbm_header_comments_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        fs::write(&p, b"P5\n# made by hand\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(read_pgm(&p).unwrap().data, vec![0.0, 1.0]);
        fs::write(&p, b"P5\n2 2\n255\n\x00\xff").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn raw_values_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.f64");
        let v = vec![0.1, -3.5e-300, f64::MAX, 1.0 / 3.0];
        write_f64s(&p, &v).unwrap();
        assert_eq!(read_f64s(&p).unwrap(), v);
        assert!(read_gray_f64(&p, 2, 2).is_ok());
        assert!(read_gray_f64(&p, 3, 2).is_err());
    }

    #[test]
    fn cameras_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cameras.csv");
        let cams = tiny_cameras();
        write_cameras_csv(&p, &cams).unwrap();
        assert_eq!(read_cameras_csv(&p).unwrap(), cams);
        let text = fs::read_to_string(&p).unwrap().replace(",0,", ",x,");
        fs::write(&p, text).unwrap();
        assert!(read_cameras_csv(&p).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let (params, _) = tiny_scene_params(11);
        let p = dir.path().join("ck.lmf");
        save_checkpoint(&p, &params).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, params);
        assert_eq!(back.checksum(), params.checksum());

        let mut bytes = fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode_checkpoint(&p, &bytes), Err(Error::Format { .. })));
        assert!(decode_checkpoint(&p, b"LMF0").is_err());
        assert!(matches!(load_checkpoint(&dir.path().join("x")), Err(Error::Missing(_))));
    }

    #[test]
    fn log_has_one_line_per_row() {
        assert_eq!(log_csv(&[]).lines().count(), 1);
    }
}

//! Image and grid file formats: binary PGM for inspection and raw float32
//! grids (`.dpt`) for lossless round-trips, plus the scene-set manifest.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, DepthMap, Homography, Intrinsics};
use crate::scene::{GroundTruth, Image, SceneKind, SceneSample};

/// Raw float grid: `width`, `height` as little-endian u32, then row-major f32 values.
pub fn encode_grid(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * values.len());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    if bytes.len() < 8 {
        return Err(Error::Format("grid file shorter than its 8-byte header".into()));
    }
    let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != 4 * width * height {
        return Err(Error::Format(format!(
            "grid header says {width}x{height} but body holds {} bytes",
            body.len()
        )));
    }
    let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok((width, height, values))
}

pub fn write_grid(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    fs::write(path, encode_grid(width, height, values))?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    decode_grid(&fs::read(path)?)
}

pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", img.width(), img.height())?;
    let bytes: Vec<u8> = img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads a binary PGM with maxval 255 into `[0, 1]` intensities.
pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
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
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::Format("only binary PGM with maxval 255 is supported".into()));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM dimension {s:?}")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let body = bytes.get(pos..pos + w * h).ok_or_else(|| Error::Format("truncated PGM body".into()))?;
    Image::new(w, h, body.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn write_image_grid(path: &Path, img: &Image) -> Result<()> {
    write_grid(path, img.width(), img.height(), img.data())
}

pub fn read_image_grid(path: &Path) -> Result<Image> {
    let (w, h, v) = read_grid(path)?;
    Image::new(w, h, v)
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let (w, h) = (depth.width(), depth.height());
    let values: Vec<f64> = (0..w * h)
        .map(|k| if depth.is_valid(k % w, k / w) { depth.values()[k] } else { 0.0 })
        .collect();
    write_grid(path, w, h, &values)
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let (w, h, v) = read_grid(path)?;
    DepthMap::from_values(w, h, v)
}

// ── Scene manifests ──

pub const MANIFEST_VERSION: &str = "rcm-manifest/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidEntry {
    pub k_a: Intrinsics,
    pub k_b: Intrinsics,
    pub pose_ab: CameraPose,
    pub depth_a: String,
    pub depth_b: String,
}

/// One scene of a manifest. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub id: usize,
    pub kind: SceneKind,
    pub width: usize,
    pub height: usize,
    /// Lossless float grids used for matching.
    pub image_a: String,
    pub image_b: String,
    /// 8-bit previews.
    pub preview_a: String,
    pub preview_b: String,
    pub scale_ratio: f64,
    pub a_larger: bool,
    pub seed: u64,
    /// Row-major A-to-B homography (planar scenes).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homography: Option<[f64; 9]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rigid: Option<RigidEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub scenes: Vec<SceneEntry>,
}

/// Writes each scene's files into `dir` and returns the manifest describing them.
pub fn write_scenes(dir: &Path, seed: u64, scenes: &[SceneSample]) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (id, s) in scenes.iter().enumerate() {
        let name = |suffix: &str| format!("scene_{id:05}_{suffix}");
        write_image_grid(&dir.join(name("a.dpt")), &s.image_a)?;
        write_image_grid(&dir.join(name("b.dpt")), &s.image_b)?;
        write_pgm(&dir.join(name("a.pgm")), &s.image_a)?;
        write_pgm(&dir.join(name("b.pgm")), &s.image_b)?;
        let (homography, rigid) = match &s.truth {
            GroundTruth::Planar(h) => (Some(h.to_row_major()), None),
            GroundTruth::Rigid { k_a, k_b, pose_ab, depth_a, depth_b } => {
                write_depth(&dir.join(name("depth_a.dpt")), depth_a)?;
                write_depth(&dir.join(name("depth_b.dpt")), depth_b)?;
                let rigid = RigidEntry {
                    k_a: *k_a,
                    k_b: *k_b,
                    pose_ab: *pose_ab,
                    depth_a: name("depth_a.dpt"),
                    depth_b: name("depth_b.dpt"),
                };
                (None, Some(rigid))
            }
        };
        entries.push(SceneEntry {
            id,
            kind: s.truth.kind(),
            width: s.width(),
            height: s.height(),
            image_a: name("a.dpt"),
            image_b: name("b.dpt"),
            preview_a: name("a.pgm"),
            preview_b: name("b.pgm"),
            scale_ratio: s.scale_ratio,
            a_larger: s.a_larger,
            seed: s.seed,
            homography,
            rigid,
        });
    }
    Ok(Manifest { version: MANIFEST_VERSION.to_string(), seed, scenes: entries })
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Format(format!("unsupported manifest version {:?}", m.version)));
    }
    Ok(m)
}

/// Loads every scene of a manifest, resolving paths against `dir`.
pub fn load_scenes(dir: &Path, manifest: &Manifest) -> Result<Vec<SceneSample>> {
    manifest
        .scenes
        .iter()
        .map(|e| {
            let truth = match (&e.homography, &e.rigid) {
                (Some(h), None) => GroundTruth::Planar(Homography::from_row_major(h)?),
                (None, Some(r)) => GroundTruth::Rigid {
                    k_a: r.k_a,
                    k_b: r.k_b,
                    pose_ab: r.pose_ab,
                    depth_a: read_depth(&dir.join(&r.depth_a))?,
                    depth_b: read_depth(&dir.join(&r.depth_b))?,
                },
                _ => return Err(Error::MissingTruth(format!("scene {}", e.id))),
            };
            Ok(SceneSample {
                image_a: read_image_grid(&dir.join(&e.image_a))?,
                image_b: read_image_grid(&dir.join(&e.image_b))?,
                truth,
                scale_ratio: e.scale_ratio,
                a_larger: e.a_larger,
                seed: e.seed,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_round_trip_is_exact_for_f32_values() {
        let values: Vec<f64> = (0..12).map(|i| (i as f32 * 0.37) as f64).collect();
        let (w, h, back) = decode_grid(&encode_grid(4, 3, &values)).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, values);
    }

    #[test]
    fn grid_rejects_bad_length() {
        let mut bytes = encode_grid(2, 2, &[1.0; 4]);
        bytes.pop();
        assert!(decode_grid(&bytes).is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let img = Image::new(3, 2, vec![0.0, 1.0, 0.5, 0.2, 0.8, 1.0]).unwrap();
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn scene_set_round_trip() {
        use crate::scene::{generate_scene, SceneConfig};
        let dir = tempfile::tempdir().unwrap();
        let planar = generate_scene(&SceneConfig::default(), 3, 0).unwrap();
        let rigid_cfg = SceneConfig { kind: SceneKind::Rigid, ..SceneConfig::default() };
        let rigid = generate_scene(&rigid_cfg, 3, 1).unwrap();
        let m = write_scenes(dir.path(), 3, &[planar.clone(), rigid.clone()]).unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        let back = load_scenes(dir.path(), &read_manifest(&path).unwrap()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].truth, planar.truth);
        assert_eq!(back[1].truth.kind(), SceneKind::Rigid);
        let p = crate::geometry::Pt2::new(40.0, 50.0);
        let (q0, q1) = (rigid.warp_a_to_b(&p).unwrap(), back[1].warp_a_to_b(&p).unwrap());
        assert!((q0 - q1).norm() < 1e-4);
        for (x, y) in planar.image_a.data().iter().zip(back[0].image_a.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn manifest_without_truth_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = crate::scene::generate_scene(&crate::scene::SceneConfig::default(), 1, 0).unwrap();
        let mut m = write_scenes(dir.path(), 1, &[s]).unwrap();
        m.scenes[0].homography = None;
        assert!(matches!(load_scenes(dir.path(), &m), Err(Error::MissingTruth(_))));
    }
}

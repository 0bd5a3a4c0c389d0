//! Dataset directories: `<id>_pre.ppm`, `<id>_post.ppm`, `<id>_mask.pgm` and
//! optional `<id>_labels.json` per scene.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::generator::ScenePair;
use super::image::RgbImage;
use super::raster::{rasterize_polygons, PolygonLabel};
use super::wkt::parse_wkt_polygon;
use crate::error::{Error, Result};
use crate::mask::Mask;

pub const PRE_SUFFIX: &str = "_pre.ppm";
pub const POST_SUFFIX: &str = "_post.ppm";
pub const MASK_SUFFIX: &str = "_mask.pgm";
pub const LABELS_SUFFIX: &str = "_labels.json";

/// Damage subtype strings and their mask values.
pub const SUBTYPES: [(&str, u8); 5] = [
    ("no-damage", 1),
    ("minor-damage", 2),
    ("major-damage", 3),
    ("destroyed", 4),
    ("un-classified", 255),
];

/// Writes through a temporary file in the same directory and renames it
/// into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses a binary netpbm header with the given magic; returns
/// `(width, height, payload offset)`.
fn netpbm_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::file(
            path,
            format!("not a binary {} file", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::file(path, format!("malformed header at byte {start}")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::file(
            path,
            "header must end with one whitespace byte",
        ));
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::file(
            path,
            format!("only 8-bit files are supported, maxval={maxval}"),
        ));
    }
    Ok((w, h, pos + 1))
}

fn payload<'a>(bytes: &'a [u8], offset: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    match bytes.len().checked_sub(offset) {
        Some(n) if n == len => Ok(&bytes[offset..]),
        Some(n) => Err(Error::file(
            path,
            format!("expected {len} payload bytes, found {n}"),
        )),
        None => Err(Error::file(path, "truncated header")),
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_interleaved());
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let (w, h, off) = netpbm_header(bytes, b"P6", path)?;
    RgbImage::from_interleaved(h, w, payload(bytes, off, 3 * w * h, path)?)
}

pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend_from_slice(mask.data());
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Mask> {
    let (w, h, off) = netpbm_header(bytes, b"P5", path)?;
    let data = payload(bytes, off, w * h, path)?.to_vec();
    Mask::new(h, w, data).map_err(|e| Error::file(path, e.to_string()))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&read_file(path)?, path)
}

pub fn read_pgm(path: &Path) -> Result<Mask> {
    decode_pgm(&read_file(path)?, path)
}

#[derive(Serialize, Deserialize, Default)]
struct LabelMeta {
    #[serde(default)]
    img_name: String,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    width: usize,
    #[serde(default)]
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct LabelFile {
    #[serde(default)]
    metadata: LabelMeta,
    features: Features,
}

#[derive(Serialize, Deserialize)]
struct Features {
    xy: Vec<Feature>,
}

#[derive(Serialize, Deserialize)]
struct Feature {
    properties: Properties,
    wkt: String,
}

#[derive(Serialize, Deserialize)]
struct Properties {
    #[serde(default = "building")]
    feature_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subtype: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    uid: Option<String>,
}

fn building() -> String {
    "building".into()
}

/// Parsed label file: polygons and the scene seed recorded with them.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSet {
    pub labels: Vec<PolygonLabel>,
    pub seed: u64,
}

pub fn subtype_value(s: &str) -> Option<u8> {
    SUBTYPES.iter().find(|(n, _)| *n == s).map(|&(_, v)| v)
}

fn subtype_name(damage: Option<u8>) -> &'static str {
    let v = damage.unwrap_or(255);
    SUBTYPES
        .iter()
        .find(|&&(_, x)| x == v)
        .map(|&(n, _)| n)
        .unwrap_or("un-classified")
}

pub fn encode_labels(pair: &ScenePair) -> String {
    let file = LabelFile {
        metadata: LabelMeta {
            img_name: pair.scene_id.clone(),
            seed: pair.seed,
            width: pair.pre.width(),
            height: pair.pre.height(),
        },
        features: Features {
            xy: pair
                .labels
                .iter()
                .enumerate()
                .map(|(i, l)| Feature {
                    properties: Properties {
                        feature_type: building(),
                        subtype: Some(subtype_name(l.damage).to_string()),
                        uid: Some(format!("{}-{i}", pair.scene_id)),
                    },
                    wkt: l.polygon.to_wkt(),
                })
                .collect(),
        },
    };
    serde_json::to_string_pretty(&file).expect("labels serialize") + "\n"
}

/// Parses a label file. A missing subtype counts as unclassified.
pub fn decode_labels(text: &str, path: &Path) -> Result<LabelSet> {
    let file: LabelFile = serde_json::from_str(text)
        .map_err(|e| Error::file(path, format!("invalid label JSON: {e}")))?;
    let mut labels = Vec::with_capacity(file.features.xy.len());
    for (i, f) in file.features.xy.iter().enumerate() {
        let polygon = parse_wkt_polygon(&f.wkt)
            .map_err(|e| Error::file(path, format!("feature {i}: {e}")))?;
        let value = match &f.properties.subtype {
            None => 255,
            Some(s) => subtype_value(s)
                .ok_or_else(|| Error::file(path, format!("feature {i}: unknown subtype `{s}`")))?,
        };
        labels.push(PolygonLabel {
            polygon,
            damage: (value != 255).then_some(value),
        });
    }
    Ok(LabelSet {
        labels,
        seed: file.metadata.seed,
    })
}

fn scene_path(dir: &Path, id: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{id}{suffix}"))
}

/// Writes every pair (labels only when present). Returns the written paths.
pub fn save_dataset(pairs: &[ScenePair], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for pair in pairs {
        let mut files = vec![
            (PRE_SUFFIX, encode_ppm(&pair.pre)),
            (POST_SUFFIX, encode_ppm(&pair.post)),
            (MASK_SUFFIX, encode_pgm(&pair.mask)),
        ];
        if !pair.labels.is_empty() {
            files.push((LABELS_SUFFIX, encode_labels(pair).into_bytes()));
        }
        for (suffix, bytes) in files {
            let path = scene_path(dir, &pair.scene_id, suffix);
            write_atomic(&path, &bytes)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Scene ids present in `dir`, sorted.
pub fn scene_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        for suffix in [PRE_SUFFIX, POST_SUFFIX, MASK_SUFFIX, LABELS_SUFFIX] {
            if let Some(id) = name.strip_suffix(suffix) {
                ids.insert(id.to_string());
            }
        }
    }
    Ok(ids.into_iter().collect())
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::file(path, "missing file of a scene pair"))
    }
}

pub fn load_scene(dir: &Path, id: &str) -> Result<ScenePair> {
    let pre_path = require(scene_path(dir, id, PRE_SUFFIX))?;
    let post_path = require(scene_path(dir, id, POST_SUFFIX))?;
    let pre = read_ppm(&pre_path)?;
    let post = read_ppm(&post_path)?;
    if pre.dims() != post.dims() {
        return Err(Error::file(
            post_path,
            format!("image is {:?}, pre image is {:?}", post.dims(), pre.dims()),
        ));
    }
    let (h, w) = pre.dims();
    let labels_path = scene_path(dir, id, LABELS_SUFFIX);
    let (mask, labels, seed) = if labels_path.is_file() {
        let text = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        let set = decode_labels(&text, &labels_path)?;
        let (mask, skipped) = rasterize_polygons(&set.labels, h, w);
        if skipped > 0 {
            log::warn!(
                "{}: skipped {skipped} zero-area polygons",
                labels_path.display()
            );
        }
        (mask, set.labels, set.seed)
    } else {
        let mask_path = require(scene_path(dir, id, MASK_SUFFIX))?;
        let mask = read_pgm(&mask_path)?;
        if mask.dims() != (h, w) {
            return Err(Error::file(
                mask_path,
                format!("mask is {:?}, images are {:?}", mask.dims(), (h, w)),
            ));
        }
        (mask, Vec::new(), 0)
    };
    Ok(ScenePair {
        scene_id: id.to_string(),
        seed,
        pre,
        post,
        mask,
        labels,
    })
}

/// Every scene of `dir`, ordered by scene id.
pub fn load_dataset(dir: &Path) -> Result<Vec<ScenePair>> {
    if !dir.is_dir() {
        return Err(Error::file(dir, "dataset directory does not exist"));
    }
    scene_ids(dir)?
        .iter()
        .map(|id| load_scene(dir, id))
        .collect()
}

/// Masks named `<id>_mask.pgm` in `dir`, ordered by id.
pub fn load_masks(dir: &Path) -> Result<Vec<(String, Mask)>> {
    if !dir.is_dir() {
        return Err(Error::file(dir, "directory does not exist"));
    }
    let mut out = Vec::new();
    for id in scene_ids(dir)? {
        let path = scene_path(dir, &id, MASK_SUFFIX);
        if path.is_file() {
            out.push((id, read_pgm(&path)?));
        }
    }
    Ok(out)
}

//! On-disk formats: 16-bit depth PNGs, 8-bit RGB PNGs and the JSON dataset
//! manifest.
//!
//! Depth PNGs follow the KITTI convention: a single 16-bit channel storing
//! `round(depth_m * 256)`, with `0` marking a pixel without depth.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DepthMap, Image, Sample, SparseDepthMap, Tag};
use crate::error::{Error, Result};

pub const DEPTH_SCALE: f64 = 256.0;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn encode_err(path: &Path, e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

fn decode_err(path: &Path, e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: &[u8],
) -> Result<()> {
    let mut out = create(path)?;
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| encode_err(path, e))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| encode_err(path, e))?;
    writer.finish().map_err(|e| encode_err(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

struct Decoded {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: Vec<u8>,
}

fn read_png(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| decode_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut bytes = vec![0; size];
    let info = reader
        .next_frame(&mut bytes)
        .map_err(|e| decode_err(path, e))?;
    bytes.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        bytes,
    })
}

/// Depth in meters to its 16-bit code. Depths beyond the representable range
/// saturate at `u16::MAX`.
pub fn quantize_depth(depth_m: f64) -> u16 {
    (depth_m * DEPTH_SCALE).round().clamp(0.0, u16::MAX as f64) as u16
}

pub fn write_depth_png16(depth: &DepthMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(depth.values().len() * 2);
    for (&v, &ok) in depth.values().iter().zip(depth.valid()) {
        let code = if ok { quantize_depth(v) } else { 0 };
        bytes.extend_from_slice(&code.to_be_bytes());
    }
    write_png(
        path,
        depth.width(),
        depth.height(),
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        &bytes,
    )
}

pub fn write_sparse_png16(sparse: &SparseDepthMap, path: impl AsRef<Path>) -> Result<()> {
    write_depth_png16(&sparse.to_depth_map(), path)
}

pub fn read_depth_png16(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let png = read_png(path)?;
    if png.color != png::ColorType::Grayscale || png.depth != png::BitDepth::Sixteen {
        return Err(Error::format(
            path,
            format!(
                "expected 16-bit single-channel PNG, found {:?} at {:?}",
                png.color, png.depth
            ),
        ));
    }
    let values: Vec<f64> = png
        .bytes
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / DEPTH_SCALE)
        .collect();
    DepthMap::from_values(png.height, png.width, values)
}

pub fn read_sparse_png16(path: impl AsRef<Path>) -> Result<SparseDepthMap> {
    Ok(SparseDepthMap::from(&read_depth_png16(path)?))
}

pub fn write_rgb_png8(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let p = h * w;
    let mut bytes = Vec::with_capacity(3 * p);
    for i in 0..p {
        for c in 0..3 {
            bytes.push((image.data()[c * p + i] * 255.0).round() as u8);
        }
    }
    write_png(
        path.as_ref(),
        w,
        h,
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        &bytes,
    )
}

pub fn read_rgb_png8(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let png = read_png(path)?;
    if png.color != png::ColorType::Rgb || png.depth != png::BitDepth::Eight {
        return Err(Error::format(
            path,
            format!(
                "expected 8-bit RGB PNG, found {:?} at {:?}",
                png.color, png.depth
            ),
        ));
    }
    let p = png.width * png.height;
    let mut data = vec![0.0; 3 * p];
    for (i, px) in png.bytes.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * p + i] = px[c] as f64 / 255.0;
        }
    }
    Image::new(png.height, png.width, data)
}

/// 8-bit grayscale PNG, used for visualizations.
pub fn write_gray_png8(
    width: usize,
    height: usize,
    bytes: &[u8],
    path: impl AsRef<Path>,
) -> Result<()> {
    write_png(
        path.as_ref(),
        width,
        height,
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        bytes,
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// One sample on disk. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub image_path: String,
    pub sparse_path: String,
    pub gt_path: String,
    pub tag: Tag,
    #[serde(default)]
    pub split: Split,
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    /// Digest of the configuration that produced the dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    /// SHA-256 over the bytes of every referenced file, in record order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_digest: Option<String>,
    pub records: Vec<Record>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            version: MANIFEST_VERSION,
            config_digest: None,
            content_digest: None,
            records: Vec::new(),
        }
    }
}

/// A manifest together with the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Manifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = create(path)?;
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        out.write_all(text.as_bytes())
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }
}

impl Dataset {
    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported manifest version {}", manifest.version),
            ));
        }
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Dataset { root, manifest })
    }

    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_record(&self, record: &Record) -> Result<Sample> {
        Sample::new(
            read_rgb_png8(self.resolve(&record.image_path))?,
            read_sparse_png16(self.resolve(&record.sparse_path))?,
            read_depth_png16(self.resolve(&record.gt_path))?,
            record.tag,
        )
    }

    /// Loads every record in `split` (all records when `None`), in manifest order.
    pub fn load_split(&self, split: Option<Split>) -> Result<Vec<Sample>> {
        self.manifest
            .records
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .map(|r| self.load_record(r))
            .collect()
    }
}

/// SHA-256 of a byte buffer as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stored_codes_decode_by_convention() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let d = DepthMap::new(1, 3, vec![1.0, 0.0, 80.0], vec![true, false, true]).unwrap();
        write_depth_png16(&d, &path).unwrap();
        assert_eq!(quantize_depth(1.0), 256);
        assert_eq!(quantize_depth(80.0), 20480);
        let back = read_depth_png16(&path).unwrap();
        assert_eq!(back.values(), &[1.0, 0.0, 80.0]);
        assert_eq!(back.valid(), &[true, false, true]);
    }

    #[test]
    fn wrong_bit_depth_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        write_rgb_png8(&Image::filled(2, 2, 0.5).unwrap(), &path).unwrap();
        assert!(matches!(read_depth_png16(&path), Err(Error::Format { .. })));
        let depth_path = dir.path().join("d.png");
        write_depth_png16(&DepthMap::constant(2, 2, 3.0).unwrap(), &depth_path).unwrap();
        assert!(matches!(
            read_rgb_png8(&depth_path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(
            read_depth_png16("/nonexistent/x.png"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/manifest.json");
        let m = Manifest {
            records: vec![Record {
                image_path: "a.png".into(),
                sparse_path: "b.png".into(),
                gt_path: "c.png".into(),
                tag: Tag::Night,
                split: Split::Test,
            }],
            ..Default::default()
        };
        m.save(&path).unwrap();
        let ds = Dataset::load(&path).unwrap();
        assert_eq!(ds.manifest, m);
        assert_eq!(ds.resolve("a.png"), dir.path().join("sub/a.png"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn png16_round_trip_within_half_quantum(vals in prop::collection::vec(0.0f64..200.0, 12)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("d.png");
            let d = DepthMap::from_values(3, 4, vals).unwrap();
            write_depth_png16(&d, &path).unwrap();
            let back = read_depth_png16(&path).unwrap();
            for i in 0..12 {
                if d.valid()[i] && back.valid()[i] {
                    prop_assert!((back.values()[i] - d.values()[i]).abs() <= 1.0 / 512.0);
                } else if d.valid()[i] {
                    // only sub-quantum depths collapse to the invalid code
                    prop_assert!(d.values()[i] < 1.0 / 512.0);
                }
            }
        }
    }
}

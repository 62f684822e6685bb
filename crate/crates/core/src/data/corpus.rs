//! PNG image/label files and the `corpus.json` manifest.

use std::cell::Cell;
use std::fs::File;
use std::io::{BufRead, BufWriter, Cursor, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::generate::{generate_sample, GeneratorConfig, SampleRecord};
use super::noise::{inject_label_noise, NoiseConfig};
use crate::canonical::{canonical_json_pretty, digest};
use crate::error::{Error, Result};
use crate::image::{LabelMap, RgbImage};

pub const MANIFEST: &str = "corpus.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "test-seen")]
    TestSeen,
    #[serde(rename = "test-unseen")]
    TestUnseen,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::TestSeen, Split::TestUnseen];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestSeen => "test-seen",
            Split::TestUnseen => "test-unseen",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?} (train, test-seen, test-unseen)")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Paths relative to the corpus directory.
    pub image: String,
    pub labels: String,
    pub split: Split,
    pub seed: u64,
}

impl ManifestEntry {
    /// File stem shared by the image and label files.
    pub fn id(&self) -> &str {
        Path::new(&self.image)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(&self.image)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub generator_digest: String,
    pub samples: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |e| e.split == split)
    }
}

/// Everything needed to regenerate a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seen: GeneratorConfig,
    pub unseen: GeneratorConfig,
    pub train: usize,
    pub test_seen: usize,
    pub test_unseen: usize,
    /// Applied to training annotations only.
    pub noise: NoiseConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seen: GeneratorConfig::default(),
            unseen: GeneratorConfig::unseen(),
            train: 200,
            test_seen: 20,
            test_unseen: 20,
            noise: NoiseConfig::default(),
        }
    }
}

/// SplitMix64 finalizer: decorrelates per-sample seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generated corpus held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub records: Vec<SampleRecord>,
}

impl Corpus {
    pub fn generate(cfg: &CorpusConfig, seed: u64) -> Result<Self> {
        cfg.seen.validate()?;
        cfg.unseen.validate()?;
        cfg.noise.validate()?;
        let plan = [
            (Split::Train, cfg.train, &cfg.seen),
            (Split::TestSeen, cfg.test_seen, &cfg.seen),
            (Split::TestUnseen, cfg.test_unseen, &cfg.unseen),
        ];
        let mut samples = Vec::new();
        let mut records = Vec::new();
        let corpus_digest = digest(cfg);
        let mut index = 0u64;
        for (split, count, gen) in plan {
            for i in 0..count {
                let s = mix_seed(seed, index);
                index += 1;
                let mut rec = generate_sample(gen, s)?;
                rec.config_digest = corpus_digest.clone();
                if split == Split::Train && !cfg.noise.is_clean() {
                    rec.labels = inject_label_noise(&rec.labels, &cfg.noise, mix_seed(s, 1))?;
                }
                let id = format!("{}-{i:04}", split.as_str());
                samples.push(ManifestEntry {
                    image: format!("images/{id}.png"),
                    labels: format!("labels/{id}.png"),
                    split,
                    seed: s,
                });
                records.push(rec);
            }
        }
        Ok(Corpus {
            manifest: CorpusManifest {
                version: MANIFEST_VERSION,
                generator_digest: corpus_digest,
                samples,
            },
            records,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "labels"] {
            std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        for (entry, rec) in self.manifest.samples.iter().zip(&self.records) {
            write_rgb(&dir.join(&entry.image), &rec.image)?;
            write_labels(&dir.join(&entry.labels), &rec.labels)?;
        }
        write_manifest(dir, &self.manifest)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let records = manifest
            .samples
            .iter()
            .map(|e| read_sample(dir, e, &manifest.generator_digest))
            .collect::<Result<_>>()?;
        Ok(Corpus { manifest, records })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = (&ManifestEntry, &SampleRecord)> {
        self.manifest
            .samples
            .iter()
            .zip(&self.records)
            .filter(move |(e, _)| e.split == split)
    }
}

pub fn read_sample(dir: &Path, entry: &ManifestEntry, digest: &str) -> Result<SampleRecord> {
    let image = read_rgb(&dir.join(&entry.image))?;
    let labels = read_labels(&dir.join(&entry.labels))?;
    if image.width() != labels.width() || image.height() != labels.height() {
        return Err(Error::Contract(format!(
            "{} is {}×{} but {} is {}×{}",
            entry.image,
            image.width(),
            image.height(),
            entry.labels,
            labels.width(),
            labels.height()
        )));
    }
    Ok(SampleRecord {
        image,
        labels,
        seed: entry.seed,
        config_digest: digest.to_string(),
    })
}

pub fn write_manifest(dir: &Path, manifest: &CorpusManifest) -> Result<()> {
    let path = dir.join(MANIFEST);
    std::fs::write(&path, canonical_json_pretty(manifest)).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(MANIFEST);
    let text = read_file(&path)?;
    let manifest: CorpusManifest = parse_json(&text, &path)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::parse(&path, 0, format!("unsupported manifest version {}", manifest.version)));
    }
    Ok(manifest)
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::io(path, e),
    })
}

/// Deserializes JSON, reporting failures as byte offsets into `bytes`.
pub fn parse_json<T: serde::de::DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| {
        let offset = line_col_offset(bytes, e.line(), e.column());
        Error::parse(path, offset, e.to_string())
    })
}

fn line_col_offset(bytes: &[u8], line: usize, column: usize) -> u64 {
    let mut start = 0usize;
    for _ in 1..line {
        match bytes[start..].iter().position(|&b| b == b'\n') {
            Some(p) => start += p + 1,
            None => break,
        }
    }
    (start + column.saturating_sub(1)).min(bytes.len()) as u64
}

/// Cursor that remembers how far the decoder has read.
struct Tracked {
    inner: Cursor<Vec<u8>>,
    high_water: Rc<Cell<u64>>,
}

impl Tracked {
    fn note(&self) {
        let p = self.inner.position();
        if p > self.high_water.get() {
            self.high_water.set(p);
        }
    }
}

impl Read for Tracked {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.note();
        Ok(n)
    }
}

impl BufRead for Tracked {
    fn fill_buf(&mut self) -> std::io::Result<&[u8]> {
        self.inner.fill_buf()
    }

    fn consume(&mut self, amt: usize) {
        self.inner.consume(amt);
        self.note();
    }
}

impl Seek for Tracked {
    fn seek(&mut self, pos: SeekFrom) -> std::io::Result<u64> {
        self.inner.seek(pos)
    }
}

struct DecodedPng {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: Vec<u8>,
}

fn decode_png(path: &Path) -> Result<DecodedPng> {
    let bytes = read_file(path)?;
    let high_water = Rc::new(Cell::new(0));
    let reader = Tracked {
        inner: Cursor::new(bytes),
        high_water: high_water.clone(),
    };
    let fail = |e: png::DecodingError| Error::parse(path, high_water.get(), format!("png: {e}"));
    let mut decoder = png::Decoder::new(reader);
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(fail)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::parse(path, high_water.get(), "png: image too large"))?;
    let mut data = vec![0; size];
    let info = reader.next_frame(&mut data).map_err(fail)?;
    data.truncate(info.buffer_size());
    Ok(DecodedPng {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data,
    })
}

fn encode_png(path: &Path, w: usize, h: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(data).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    encode_png(
        path,
        img.width(),
        img.height(),
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        img.data(),
    )
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let png = decode_png(path)?;
    if png.color != png::ColorType::Rgb || png.depth != png::BitDepth::Eight {
        return Err(Error::parse(
            path,
            0,
            format!("expected 8-bit RGB, found {:?} at {:?}", png.color, png.depth),
        ));
    }
    RgbImage::from_raw(png.width, png.height, png.data)
}

/// 16-bit grayscale, gray value = label.
pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let max = labels.max_label();
    if max > u16::MAX as u32 {
        return Err(Error::Domain(format!(
            "label {max} does not fit a 16-bit label image ({})",
            path.display()
        )));
    }
    let bytes: Vec<u8> = labels.data().iter().flat_map(|&l| (l as u16).to_be_bytes()).collect();
    encode_png(
        path,
        labels.width(),
        labels.height(),
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        &bytes,
    )
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let png = decode_png(path)?;
    if png.color != png::ColorType::Grayscale || png.depth != png::BitDepth::Sixteen {
        return Err(Error::parse(
            path,
            0,
            format!("expected 16-bit grayscale, found {:?} at {:?}", png.color, png.depth),
        ));
    }
    let data = png
        .data
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
        .collect();
    LabelMap::from_raw(png.width, png.height, data)
}

/// Paths of all files a corpus references, for existence checks.
pub fn referenced_files(dir: &Path, manifest: &CorpusManifest) -> Vec<PathBuf> {
    manifest
        .samples
        .iter()
        .flat_map(|e| [dir.join(&e.image), dir.join(&e.labels)])
        .collect()
}

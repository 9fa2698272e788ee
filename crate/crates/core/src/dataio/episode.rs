//! Episode records and their on-disk directory format.
//!
//! A directory holds `episode.csv` with the exact header
//! `t,timestamp,image,steering,anomaly`, one 8-bit RGB PNG per record, and an
//! optional `meta.toml` describing frame size, steering range and source.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::render::level_to_f32;
use crate::error::{Error, Result};
use crate::frame::Frame;

pub const MANIFEST: &str = "episode.csv";
pub const MANIFEST_HEADER: &str = "t,timestamp,image,steering,anomaly";
pub const META: &str = "meta.toml";

/// Where an episode came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceTag {
    Synthetic,
    IndoorFormat,
    UdacityFormat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub height: usize,
    pub width: usize,
    pub steering_range: (f64, f64),
    pub source: SourceTag,
}

/// One `(x_t, u_t)` sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub t: usize,
    pub timestamp: f64,
    /// Frame file name relative to the episode directory.
    pub image: String,
    pub steering: f64,
    pub anomaly: Option<bool>,
}

impl EpisodeRecord {
    pub fn default_image_name(t: usize) -> String {
        format!("frame_{t:05}.png")
    }
}

/// Time-ordered records with their decoded frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    records: Vec<EpisodeRecord>,
    frames: Vec<Frame<f32>>,
    meta: EpisodeMeta,
}

impl Episode {
    pub fn new(records: Vec<EpisodeRecord>, frames: Vec<Frame<f32>>, meta: EpisodeMeta) -> Result<Self> {
        if records.len() != frames.len() {
            return Err(Error::invalid(format!(
                "{} records but {} frames",
                records.len(),
                frames.len()
            )));
        }
        for w in records.windows(2) {
            if w[1].t <= w[0].t {
                return Err(Error::invalid(format!("record index {} does not follow {}", w[1].t, w[0].t)));
            }
        }
        if let Some(r) = records.iter().find(|r| !r.steering.is_finite()) {
            return Err(Error::invalid(format!("record {} has non-finite steering", r.t)));
        }
        if let Some(first) = frames.first() {
            if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.dims() != first.dims()) {
                return Err(Error::invalid(format!(
                    "frame {i} is {:?}, expected {:?}",
                    f.dims(),
                    first.dims()
                )));
            }
        }
        Ok(Episode { records, frames, meta })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EpisodeRecord] {
        &self.records
    }

    pub fn frames(&self) -> &[Frame<f32>] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &Frame<f32> {
        &self.frames[i]
    }

    pub fn steering(&self, i: usize) -> f64 {
        self.records[i].steering
    }

    pub fn commands(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.steering).collect()
    }

    pub fn meta(&self) -> &EpisodeMeta {
        &self.meta
    }

    pub fn frame_dims(&self) -> Option<(usize, usize, usize)> {
        self.frames.first().map(Frame::dims)
    }

    /// Ground-truth labels, if every record carries one.
    pub fn labels(&self) -> Option<Vec<bool>> {
        self.records.iter().map(|r| r.anomaly).collect()
    }

    /// Same records with every frame resampled to `height × width`.
    pub fn resized(&self, height: usize, width: usize) -> Result<Episode> {
        let frames = self
            .frames
            .iter()
            .map(|f| f.resize(height, width))
            .collect::<Result<Vec<_>>>()?;
        let meta = EpisodeMeta {
            height,
            width,
            ..self.meta.clone()
        };
        Episode::new(self.records.clone(), frames, meta)
    }

    /// Writes manifest, frames and metadata into `dir` (created if needed).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = dir.join(MANIFEST);
        let mut w = csv::Writer::from_path(&manifest).map_err(|e| csv_err(&manifest, e))?;
        w.write_record(MANIFEST_HEADER.split(',')).map_err(|e| csv_err(&manifest, e))?;
        for r in &self.records {
            let anomaly = match r.anomaly {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            w.write_record([
                r.t.to_string(),
                r.timestamp.to_string(),
                r.image.clone(),
                r.steering.to_string(),
                anomaly.to_string(),
            ])
            .map_err(|e| csv_err(&manifest, e))?;
        }
        w.flush().map_err(|e| Error::io(&manifest, e))?;
        for (r, f) in self.records.iter().zip(&self.frames) {
            save_png(f, &dir.join(&r.image))?;
        }
        let meta = toml::to_string(&MetaFile {
            length: self.records.len(),
            meta: self.meta.clone(),
        })
        .expect("meta serializes");
        let path = dir.join(META);
        fs::write(&path, meta).map_err(|e| Error::io(&path, e))
    }

    /// Reads a directory written by [`Episode::save`] or hand-assembled in
    /// the same layout (then tagged indoor-format).
    pub fn load(dir: &Path) -> Result<Episode> {
        let manifest = dir.join(MANIFEST);
        if !manifest.is_file() {
            return Err(Error::format(&manifest, "missing episode manifest"));
        }
        let mut rdr = csv::Reader::from_path(&manifest).map_err(|e| csv_err(&manifest, e))?;
        let header = rdr.headers().map_err(|e| csv_err(&manifest, e))?.iter().collect::<Vec<_>>().join(",");
        if header != MANIFEST_HEADER {
            return Err(Error::format(
                &manifest,
                format!("header {header:?}, expected {MANIFEST_HEADER:?}"),
            ));
        }
        let mut records = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| csv_err(&manifest, e))?;
            let bad = |what: &str| Error::format(&manifest, format!("record {i}: bad {what}"));
            let t = row[0].parse::<usize>().map_err(|_| bad("t"))?;
            let timestamp = row[1].parse::<f64>().map_err(|_| bad("timestamp"))?;
            let steering = row[3].parse::<f64>().map_err(|_| bad("steering"))?;
            let anomaly = match &row[4] {
                "" => None,
                "0" | "false" => Some(false),
                "1" | "true" => Some(true),
                _ => return Err(bad("anomaly")),
            };
            records.push(EpisodeRecord {
                t,
                timestamp,
                image: row[2].to_string(),
                steering,
                anomaly,
            });
        }
        let meta_path = dir.join(META);
        let meta = if meta_path.is_file() {
            let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            let file: MetaFile = toml::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
            if file.length != records.len() {
                return Err(Error::format(
                    &manifest,
                    format!("frame count mismatch: meta says {}, manifest has {}", file.length, records.len()),
                ));
            }
            Some(file.meta)
        } else {
            None
        };
        let frames = records
            .iter()
            .enumerate()
            .map(|(i, r)| load_frame(&dir.join(&r.image), i, None))
            .collect::<Result<Vec<_>>>()?;
        let meta = match meta {
            Some(m) => m,
            None => {
                let (height, width) = frames.first().map(|f| (f.height(), f.width())).unwrap_or((0, 0));
                EpisodeMeta {
                    height,
                    width,
                    steering_range: super::sim::steering_range(&records),
                    source: SourceTag::IndoorFormat,
                }
            }
        };
        Episode::new(records, frames, meta).map_err(|e| Error::format(&manifest, e.to_string()))
    }

    /// Loads a driving log table with timestamp, image path and steering
    /// columns (Udacity-style `interpolated.csv` or `driving_log.csv`).
    ///
    /// Image paths resolve relative to the table's directory. Frames are
    /// resampled to `resize` when given.
    pub fn load_udacity(table: &Path, resize: Option<(usize, usize)>) -> Result<Episode> {
        let base = table.parent().unwrap_or(Path::new("."));
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(table)
            .map_err(|e| csv_err(table, e))?;
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| csv_err(table, e))?
            .iter()
            .map(|h| h.to_ascii_lowercase())
            .collect();
        let find = |names: &[&str]| headers.iter().position(|h| names.contains(&h.as_str()));
        let ts_col = find(&["timestamp", "time", "stamp"]);
        let img_col = find(&["filename", "image", "center", "frame", "path"])
            .ok_or_else(|| Error::format(table, "no image column"))?;
        let steer_col = find(&["angle", "steering", "steering_angle"])
            .ok_or_else(|| Error::format(table, "no steering column"))?;
        let mut records = Vec::new();
        let mut frames = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| csv_err(table, e))?;
            let bad = |what: &str| Error::format(table, format!("record {i}: bad {what}"));
            let mut timestamp = match ts_col {
                Some(c) => row[c].parse::<f64>().map_err(|_| bad("timestamp"))?,
                None => i as f64,
            };
            // Nanosecond epoch stamps.
            if timestamp > 1e15 {
                timestamp /= 1e9;
            }
            let steering = row[steer_col].parse::<f64>().map_err(|_| bad("steering"))?;
            let image = row[img_col].to_string();
            frames.push(load_frame(&base.join(&image), i, resize)?);
            records.push(EpisodeRecord {
                t: i,
                timestamp,
                image,
                steering,
                anomaly: None,
            });
        }
        let (height, width) = frames.first().map(|f: &Frame<f32>| (f.height(), f.width())).unwrap_or((0, 0));
        let meta = EpisodeMeta {
            height,
            width,
            steering_range: super::sim::steering_range(&records),
            source: SourceTag::UdacityFormat,
        };
        Episode::new(records, frames, meta).map_err(|e| Error::format(table, e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    length: usize,
    #[serde(flatten)]
    meta: EpisodeMeta,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

pub fn save_png(frame: &Frame<f32>, path: &Path) -> Result<()> {
    let (c, h, w) = frame.dims();
    if c != 3 {
        return Err(Error::invalid(format!("PNG export needs RGB frames, got {c} channels")));
    }
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |ch: usize| (frame.plane(ch)[i] * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

fn load_frame(path: &Path, index: usize, resize: Option<(usize, usize)>) -> Result<Frame<f32>> {
    if !path.is_file() {
        return Err(Error::format(path, format!("record {index}: image file missing")));
    }
    let img = image::open(path)
        .map_err(|e| Error::format(path, format!("record {index}: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = level_to_f32(px[c]);
        }
    }
    let frame = Frame::new(3, h, w, data)?;
    match resize {
        Some((rh, rw)) => frame.resize(rh, rw),
        None => Ok(frame),
    }
}

/// Conventional sub-directories of a linked anomaly pair.
pub fn linked_dirs(root: &Path) -> (PathBuf, PathBuf) {
    (root.join("nominal"), root.join("executed"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{simulate_episode, WorldConfig};

    fn small() -> WorldConfig {
        WorldConfig {
            image_height: 32,
            image_width: 40,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ep = simulate_episode(&small(), 11, 10).unwrap();
        ep.save(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(text.lines().next().unwrap(), MANIFEST_HEADER);
        let back = Episode::load(dir.path()).unwrap();
        assert_eq!(back, ep);
    }

    #[test]
    fn missing_image_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let ep = simulate_episode(&small(), 1, 6).unwrap();
        ep.save(dir.path()).unwrap();
        fs::remove_file(dir.path().join(&ep.records()[3].image)).unwrap();
        match Episode::load(dir.path()) {
            Err(Error::Format { message, .. }) => assert!(message.contains("record 3"), "{message}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn missing_manifest_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Episode::load(dir.path()), Err(Error::Format { .. })));
        let ep = simulate_episode(&small(), 1, 6).unwrap();
        ep.save(dir.path()).unwrap();
        let meta = fs::read_to_string(dir.path().join(META)).unwrap();
        fs::write(dir.path().join(META), meta.replace("length = 6", "length = 7")).unwrap();
        match Episode::load(dir.path()) {
            Err(Error::Format { message, .. }) => assert!(message.contains("mismatch")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_image_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let ep = simulate_episode(&small(), 1, 6).unwrap();
        ep.save(dir.path()).unwrap();
        fs::write(dir.path().join(&ep.records()[2].image), b"not a png").unwrap();
        match Episode::load(dir.path()) {
            Err(Error::Format { message, .. }) => assert!(message.contains("record 2")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn hand_made_directory_is_indoor_format() {
        let dir = tempfile::tempdir().unwrap();
        let ep = simulate_episode(&small(), 1, 6).unwrap();
        ep.save(dir.path()).unwrap();
        fs::remove_file(dir.path().join(META)).unwrap();
        let back = Episode::load(dir.path()).unwrap();
        assert_eq!(back.meta().source, SourceTag::IndoorFormat);
        assert_eq!(back.records(), ep.records());
    }

    #[test]
    fn udacity_table_loads() {
        let dir = tempfile::tempdir().unwrap();
        let ep = simulate_episode(&small(), 2, 5).unwrap();
        fs::create_dir(dir.path().join("center")).unwrap();
        let mut table = String::from("index,timestamp,width,height,frame_id,filename,angle,torque,speed\n");
        for (i, f) in ep.frames().iter().enumerate() {
            let name = format!("center/{}.png", 1479424215880976321u64 + i as u64 * 50_000_000);
            save_png(f, &dir.path().join(&name)).unwrap();
            table.push_str(&format!(
                "{i},{},40,32,center_camera,{name},{},0,5\n",
                1479424215880976321u64 + i as u64 * 50_000_000,
                ep.steering(i)
            ));
        }
        let path = dir.path().join("interpolated.csv");
        fs::write(&path, table).unwrap();
        let loaded = Episode::load_udacity(&path, None).unwrap();
        assert_eq!(loaded.meta().source, SourceTag::UdacityFormat);
        assert_eq!(loaded.len(), 5);
        assert_eq!(loaded.frames(), ep.frames());
        assert_eq!(loaded.commands(), ep.commands());
        assert!((loaded.records()[1].timestamp - loaded.records()[0].timestamp - 0.05).abs() < 1e-6);
    }
}

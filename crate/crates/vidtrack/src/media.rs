//! Video ingest, trajectory files and the on-disk artifact cache.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use fs2::FileExt;
use image::{imageops, AnimationDecoder, ImageBuffer, Rgb};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use vidtrack_core::checksum::fnv1a;
use vidtrack_core::{Image, Point2};

use crate::error::{Error, Result};

/// Environment variable overriding the cache root.
pub const CACHE_ENV: &str = "VIDTRACK_CACHE";

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "gif", "bmp"];

/// Decoded frames at working resolution, RGB in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct FrameSequence {
    pub frames: Vec<Image>,
    pub source_path: String,
    /// `(height, width)` of the decoded input.
    pub original_size: (usize, usize),
    /// `(height, width)` of every frame in `frames`.
    pub working_size: (usize, usize),
}

impl FrameSequence {
    pub fn new(frames: Vec<Image>, source_path: impl Into<String>, original_size: (usize, usize)) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::input(format!("a video needs at least 2 frames, got {}", frames.len())));
        }
        let working_size = (frames[0].height, frames[0].width);
        if frames.iter().any(|f| (f.height, f.width) != working_size || f.channels != 3) {
            return Err(Error::input("all frames must be RGB with identical size"));
        }
        let mut frames = frames;
        frames.iter_mut().for_each(Image::clamp_unit);
        Ok(Self { frames, source_path: source_path.into(), original_size, working_size })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.working_size.0
    }

    pub fn width(&self) -> usize {
        self.working_size.1
    }

    fn scale(&self) -> (f64, f64) {
        (
            self.original_size.1 as f64 / self.working_size.1 as f64,
            self.original_size.0 as f64 / self.working_size.0 as f64,
        )
    }

    pub fn to_original(&self, p: Point2) -> Point2 {
        let (sx, sy) = self.scale();
        p.scale(sx, sy)
    }

    pub fn to_working(&self, p: Point2) -> Point2 {
        let (sx, sy) = self.scale();
        p.scale(1.0 / sx, 1.0 / sy)
    }

    /// Stable identifier for cache keys: the file or directory stem.
    pub fn video_id(&self) -> String {
        let stem = Path::new(&self.source_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "video".into());
        stem.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
    }

    /// Checksum over the pixel data, so cache entries follow content changes.
    pub fn content_hash(&self) -> u64 {
        let mut h = vidtrack_core::checksum::Fnv1a::new();
        for f in &self.frames {
            for v in &f.data {
                h.update(&v.to_le_bytes());
            }
        }
        h.finish()
    }
}

fn to_image(buf: &ImageBuffer<Rgb<f32>, Vec<f32>>) -> Result<Image> {
    Ok(Image::new(buf.height() as usize, buf.width() as usize, 3, buf.as_raw().clone())?)
}

fn decode_error(path: &Path, msg: impl ToString) -> Error {
    Error::Decode { path: path.to_path_buf(), msg: msg.to_string() }
}

fn decode_frames(path: &Path) -> Result<Vec<ImageBuffer<Rgb<f32>, Vec<f32>>>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        files.sort();
        return files
            .iter()
            .map(|f| image::open(f).map(|im| im.into_rgb32f()).map_err(|e| decode_error(f, e)))
            .collect();
    }
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    if ext == "gif" {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let dec = image::codecs::gif::GifDecoder::new(std::io::BufReader::new(file)).map_err(|e| decode_error(path, e))?;
        let frames = dec.into_frames().collect_frames().map_err(|e| decode_error(path, e))?;
        return Ok(frames
            .into_iter()
            .map(|f| image::DynamicImage::ImageRgba8(f.into_buffer()).into_rgb32f())
            .collect());
    }
    let im = image::open(path).map_err(|e| decode_error(path, e))?;
    Ok(vec![im.into_rgb32f()])
}

/// Loads a directory of frame images (sorted by file name) or an animated GIF
/// and resizes every frame to `working_height`, keeping the aspect ratio.
pub fn load_video(path: impl AsRef<Path>, working_height: usize) -> Result<FrameSequence> {
    let path = path.as_ref();
    if working_height < 32 {
        return Err(Error::input("working height must be at least 32 pixels"));
    }
    if !path.exists() {
        return Err(Error::input(format!("video not found: {}", path.display())));
    }
    let raw = decode_frames(path)?;
    if raw.len() < 2 {
        return Err(Error::input(format!("{} holds {} frame(s); at least 2 are required", path.display(), raw.len())));
    }
    let (w0, h0) = raw[0].dimensions();
    if raw.iter().any(|f| f.dimensions() != (w0, h0)) {
        return Err(decode_error(path, "frames differ in size"));
    }
    let h = working_height as u32;
    let w = ((w0 as f64 * working_height as f64 / h0 as f64).round() as u32).max(1);
    let frames = raw
        .iter()
        .map(|f| {
            if (w, h) == (w0, h0) {
                to_image(f)
            } else {
                to_image(&imageops::resize(f, w, h, imageops::FilterType::Triangle))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames, path.to_string_lossy(), (h0 as usize, w0 as usize))
}

pub fn image_to_rgb8(img: &Image) -> image::RgbImage {
    image::RgbImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        let p = img.pixel(y as usize, x as usize);
        Rgb([0, 1, 2].map(|c| (p[c].clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// Writes frames as `00000.png`, `00001.png`, ... into `dir`.
pub fn save_frames(frames: &[Image], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, f) in frames.iter().enumerate() {
        let p = dir.join(format!("{k:05}.png"));
        image_to_rgb8(f).save(&p).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

/// One tracked position of one query on one frame, at original resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub query_id: u32,
    pub query_frame: u32,
    pub frame: u32,
    pub x: f64,
    pub y: f64,
    pub visible: bool,
    pub similarity: f64,
}

pub const TRAJECTORY_HEADER: &str = "query_id,query_frame,frame,x,y,visible,similarity";
const TRAJECTORY_MAGIC: [u8; 4] = *b"VTRJ";
const TRAJECTORY_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TrajectoryFile {
    magic: [u8; 4],
    version: u32,
    records: Vec<TrajectoryRecord>,
}

fn sorted(records: &[TrajectoryRecord]) -> Vec<TrajectoryRecord> {
    let mut v = records.to_vec();
    v.sort_by_key(|r| (r.query_id, r.frame));
    v
}

pub fn trajectories_to_csv(records: &[TrajectoryRecord]) -> String {
    let mut s = String::with_capacity(48 * (records.len() + 1));
    s.push_str(TRAJECTORY_HEADER);
    s.push('\n');
    for r in sorted(records) {
        s.push_str(&format!(
            "{},{},{},{:.4},{:.4},{},{:.4}\n",
            r.query_id,
            r.query_frame,
            r.frame,
            r.x,
            r.y,
            u8::from(r.visible),
            r.similarity
        ));
    }
    s
}

/// Writes the text table to `path` with a `.csv` extension and the lossless
/// binary container next to it with a `.bin` extension. Returns both paths.
pub fn export_trajectories(records: &[TrajectoryRecord], path: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    if records.is_empty() {
        return Err(vidtrack_core::Error::precondition("no trajectory records to export").into());
    }
    let path = path.as_ref();
    let csv = path.with_extension("csv");
    let bin = path.with_extension("bin");
    if let Some(dir) = csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&csv, trajectories_to_csv(records)).map_err(|e| Error::io(&csv, e))?;
    let file = TrajectoryFile { magic: TRAJECTORY_MAGIC, version: TRAJECTORY_VERSION, records: sorted(records) };
    fs::write(&bin, bincode::serialize(&file)?).map_err(|e| Error::io(&bin, e))?;
    Ok((csv, bin))
}

fn parse_csv(text: &str, path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(TRAJECTORY_HEADER) {
        return Err(decode_error(path, "missing trajectory header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.trim().split(',').collect();
            let bad = || decode_error(path, format!("malformed row {}", n + 2));
            if f.len() != 7 {
                return Err(bad());
            }
            Ok(TrajectoryRecord {
                query_id: f[0].parse().map_err(|_| bad())?,
                query_frame: f[1].parse().map_err(|_| bad())?,
                frame: f[2].parse().map_err(|_| bad())?,
                x: f[3].parse().map_err(|_| bad())?,
                y: f[4].parse().map_err(|_| bad())?,
                visible: match f[5] {
                    "1" => true,
                    "0" => false,
                    _ => return Err(bad()),
                },
                similarity: f[6].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Reads either format, chosen by extension (`.bin` binary, otherwise text).
pub fn read_trajectories(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRecord>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "bin") {
        let file: TrajectoryFile = bincode::deserialize(&bytes)?;
        if file.magic != TRAJECTORY_MAGIC || file.version != TRAJECTORY_VERSION {
            return Err(decode_error(path, "not a trajectory container of a supported version"));
        }
        return Ok(file.records);
    }
    let text = String::from_utf8(bytes).map_err(|e| decode_error(path, e))?;
    parse_csv(&text, path)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub video_id: String,
    pub stage: String,
    pub config_hash: String,
}

impl CacheKey {
    pub fn new(video_id: impl Into<String>, stage: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Self { video_id: video_id.into(), stage: stage.into(), config_hash: config_hash.into() }
    }

    fn validate(&self) -> Result<()> {
        for part in [&self.video_id, &self.stage, &self.config_hash] {
            if part.is_empty() || part.contains(['/', '\\']) || part == ".." {
                return Err(Error::input(format!("invalid cache key component {part:?}")));
            }
        }
        Ok(())
    }
}

/// Hex digest of any serializable configuration, used as `config_hash`.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).unwrap_or_default();
    format!("{:016x}", fnv1a(&json))
}

/// Content-addressed artifact store laid out as
/// `<root>/<video_id>/<stage>/<config_hash>.bin`. Each file carries a trailing
/// FNV-1a checksum of its payload.
#[derive(Clone, Debug)]
pub struct ArtifactCache {
    root: PathBuf,
    hits: Arc<AtomicUsize>,
    misses: Arc<AtomicUsize>,
}

impl ArtifactCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), hits: Arc::default(), misses: Arc::default() }
    }

    /// `(hits, misses)` of `get_or_compute` since construction.
    pub fn stats(&self) -> (usize, usize) {
        (self.hits.load(Ordering::Relaxed), self.misses.load(Ordering::Relaxed))
    }

    /// Root from the environment override, else `default`.
    pub fn from_env_or(default: impl Into<PathBuf>) -> Self {
        match std::env::var_os(CACHE_ENV) {
            Some(v) if !v.is_empty() => Self::new(v),
            _ => Self::new(default),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, key: &CacheKey) -> PathBuf {
        self.root.join(&key.video_id).join(&key.stage).join(format!("{}.bin", key.config_hash))
    }

    pub fn put(&self, key: &CacheKey, bytes: &[u8]) -> Result<()> {
        key.validate()?;
        let path = self.path(key);
        let dir = path.parent().expect("cache path has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lock_path = path.with_extension("lock");
        let lock = fs::OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|e| Error::io(&lock_path, e))?;
        lock.lock_exclusive().map_err(|e| Error::io(&lock_path, e))?;
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        let result = (|| {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&fnv1a(bytes).to_le_bytes()).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
            fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
        })();
        let _ = fs2::FileExt::unlock(&lock);
        result
    }

    /// `Ok(None)` on a miss; a checksum mismatch is a cache error.
    pub fn get(&self, key: &CacheKey) -> Result<Option<Vec<u8>>> {
        key.validate()?;
        let path = self.path(key);
        let mut bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        if bytes.len() < 8 {
            return Err(Error::Cache(format!("{} is truncated", path.display())));
        }
        let split = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[split..].try_into().expect("8 bytes"));
        bytes.truncate(split);
        if fnv1a(&bytes) != stored {
            return Err(Error::Cache(format!("checksum mismatch in {}", path.display())));
        }
        Ok(Some(bytes))
    }

    /// Deserialized hit, or computes, stores and returns the value. Corrupt
    /// entries are recomputed.
    pub fn get_or_compute<T, F>(&self, key: &CacheKey, compute: F) -> Result<T>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T>,
    {
        match self.get(key) {
            Ok(Some(bytes)) => match bincode::deserialize(&bytes) {
                Ok(v) => {
                    log::debug!("cache hit {}/{}/{}", key.video_id, key.stage, key.config_hash);
                    self.hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(v);
                }
                Err(e) => log::warn!("cache entry {} unreadable ({e}); recomputing", self.path(key).display()),
            },
            Ok(None) => {}
            Err(Error::Cache(msg)) => log::warn!("{msg}; recomputing"),
            Err(e) => return Err(e),
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let value = compute()?;
        self.put(key, &bincode::serialize(&value)?)?;
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(h: usize, w: usize, orig: (usize, usize)) -> FrameSequence {
        let f = Image::filled(h, w, &[0.5, 0.5, 0.5]);
        FrameSequence::new(vec![f.clone(), f], "clip.gif", orig).unwrap()
    }

    #[test]
    fn coordinate_round_trip() {
        let s = seq(480, 854, (960, 1708));
        for &(x, y) in &[(0.0, 0.0), (853.25, 479.5), (123.456, 78.9)] {
            let p = Point2::new(x, y);
            let q = s.to_working(s.to_original(p));
            assert!(q.dist(p) < 1e-6);
        }
    }

    #[test]
    fn single_frame_is_rejected() {
        let f = Image::filled(40, 40, &[0.0, 0.0, 0.0]);
        assert!(matches!(FrameSequence::new(vec![f], "x", (40, 40)), Err(Error::Input(_))));
    }

    #[test]
    fn csv_row_format() {
        let r = TrajectoryRecord { query_id: 0, query_frame: 0, frame: 0, x: 12.5, y: 7.25, visible: true, similarity: 1.0 };
        let text = trajectories_to_csv(&[r]);
        assert_eq!(text, format!("{TRAJECTORY_HEADER}\n0,0,0,12.5000,7.2500,1,1.0000\n"));
    }

    #[test]
    fn cache_key_rejects_path_components() {
        let dir = std::env::temp_dir().join("vidtrack-cache-key-test");
        let c = ArtifactCache::new(&dir);
        assert!(c.put(&CacheKey::new("a/b", "s", "h"), b"x").is_err());
        assert!(c.get(&CacheKey::new("", "s", "h")).is_err());
    }
}

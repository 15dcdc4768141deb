//! Image cache for the generated "imagination" images, plus horizontal
//! composition of story segments.
//!
//! Cache layout: `<dir>/<first two hex digits>/<key>.png` with a `<key>.json`
//! sidecar holding the request that produced it.

use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Write as _};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::backends::ImageGenerator;
use crate::hashing::sha256_hex;
use crate::{Error, Result};

/// A PNG image plus its content address.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageArtifact {
    pub width: u32,
    pub height: u32,
    bytes: Arc<Vec<u8>>,
    pub cache_key: String,
}

impl std::fmt::Debug for ImageArtifact {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageArtifact")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("bytes", &self.bytes.len())
            .field("cache_key", &self.cache_key)
            .finish()
    }
}

impl ImageArtifact {
    /// Wraps PNG bytes after checking that they decode.
    pub fn from_png(bytes: Vec<u8>, cache_key: String) -> Result<Self> {
        let (width, height, _) = decode_rgb(&bytes).map_err(|message| Error::ImageFormat {
            key: cache_key.clone(),
            message,
        })?;
        Ok(Self {
            width,
            height,
            bytes: Arc::new(bytes),
            cache_key,
        })
    }

    pub fn from_rgb(width: u32, height: u32, rgb: &[u8], cache_key: String) -> Self {
        Self {
            width,
            height,
            bytes: Arc::new(encode_png_rgb(width, height, rgb)),
            cache_key,
        }
    }

    /// The PNG encoding.
    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Decoded 8-bit RGB pixels, row-major.
    pub fn rgb(&self) -> Result<Vec<u8>> {
        decode_rgb(&self.bytes)
            .map(|(_, _, px)| px)
            .map_err(|message| Error::ImageFormat {
                key: self.cache_key.clone(),
                message,
            })
    }
}

/// SHA-256 over `model_id \n prompt \n seed \n WxH`.
pub fn cache_key(model_id: &str, prompt: &str, seed: u64, width: u32, height: u32) -> String {
    sha256_hex(format!("{model_id}\n{prompt}\n{seed}\n{width}x{height}").as_bytes())
}

/// Encodes 8-bit RGB pixels as an uncompressed, unfiltered PNG so that equal
/// pixels always give equal bytes.
pub fn encode_png_rgb(width: u32, height: u32, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width as usize * height as usize * 3, "pixel buffer size");
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::NoCompression);
        enc.set_filter(png::Filter::NoFilter);
        let mut w = enc.write_header().expect("writing to a Vec cannot fail");
        w.write_image_data(rgb).expect("buffer size checked above");
    }
    out
}

/// Decodes any 8-bit-normalizable PNG to RGB, dropping alpha.
pub fn decode_rgb(bytes: &[u8]) -> std::result::Result<(u32, u32, Vec<u8>), String> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| e.to_string())?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| "image too large".to_string())?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err("palette was not expanded".into()),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut rgb = Vec::with_capacity(w * h * 3);
    if channels == 3 {
        for row in buf.chunks(info.line_size).take(h) {
            rgb.extend_from_slice(&row[..w * 3]);
        }
        return Ok((info.width, info.height, rgb));
    }
    for row in buf.chunks(info.line_size).take(h) {
        for px in row[..w * channels].chunks(channels) {
            match channels {
                1 | 2 => rgb.extend_from_slice(&[px[0], px[0], px[0]]),
                _ => rgb.extend_from_slice(&px[..3]),
            }
        }
    }
    Ok((info.width, info.height, rgb))
}

fn rescale_nearest(rgb: &[u8], w: u32, h: u32, new_w: u32, new_h: u32) -> Vec<u8> {
    let (w, h, nw, nh) = (w as u64, h as u64, new_w as u64, new_h as u64);
    let mut out = Vec::with_capacity((nw * nh * 3) as usize);
    for y in 0..nh {
        let sy = y * h / nh;
        for x in 0..nw {
            let sx = x * w / nw;
            let i = ((sy * w + sx) * 3) as usize;
            out.extend_from_slice(&rgb[i..i + 3]);
        }
    }
    out
}

/// Concatenates images left to right. Taller images are first rescaled
/// (nearest neighbor, aspect preserved) to the smallest height.
pub fn hstack(images: &[ImageArtifact]) -> Result<ImageArtifact> {
    match images {
        [] => Err(Error::Precondition("hstack needs at least one image".into())),
        [one] => Ok(one.clone()),
        _ => {
            let min_h = images.iter().map(|i| i.height).min().expect("non-empty");
            let mut parts = Vec::with_capacity(images.len());
            for img in images {
                let rgb = img.rgb()?;
                if img.height == min_h {
                    parts.push((img.width, rgb));
                } else {
                    let scaled = (u64::from(img.width) * u64::from(min_h) * 2 + u64::from(img.height))
                        / (2 * u64::from(img.height));
                    let new_w = (scaled as u32).max(1);
                    parts.push((new_w, rescale_nearest(&rgb, img.width, img.height, new_w, min_h)));
                }
            }
            let total_w: u32 = parts.iter().map(|(w, _)| *w).sum();
            let mut out = Vec::with_capacity(total_w as usize * min_h as usize * 3);
            for y in 0..min_h as usize {
                for (w, px) in &parts {
                    let stride = *w as usize * 3;
                    out.extend_from_slice(&px[y * stride..(y + 1) * stride]);
                }
            }
            let keys: Vec<&str> = images.iter().map(|i| i.cache_key.as_str()).collect();
            let key = sha256_hex(format!("hstack\n{}", keys.join("\n")).as_bytes());
            Ok(ImageArtifact::from_rgb(total_w, min_h, &out, key))
        }
    }
}

/// How the demo composite is built for a multi-segment story.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemoComposite {
    /// The demo image is passed once.
    #[default]
    Once,
    /// The demo image is repeated once per segment and stacked.
    Five,
}

/// The fixed image used by demo-image experiments.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoConfig {
    /// PNG file to use; a built-in gradient is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub composite: DemoComposite,
}

impl DemoConfig {
    pub fn load(&self, width: u32, height: u32) -> Result<ImageArtifact> {
        match &self.path {
            Some(p) => {
                let bytes = fs::read(p)
                    .map_err(|e| Error::Config(format!("demo image {}: {e}", p.display())))?;
                let key = sha256_hex(&bytes);
                ImageArtifact::from_png(bytes, key)
            }
            None => Ok(builtin_demo_image(width, height)),
        }
    }
}

/// A deterministic diagonal gradient.
pub fn builtin_demo_image(width: u32, height: u32) -> ImageArtifact {
    let mut rgb = Vec::with_capacity(width as usize * height as usize * 3);
    for y in 0..height {
        for x in 0..width {
            let r = (x * 255 / width.max(2).saturating_sub(1).max(1)) as u8;
            let g = (y * 255 / height.max(2).saturating_sub(1).max(1)) as u8;
            rgb.extend_from_slice(&[r, g, 128]);
        }
    }
    let png = encode_png_rgb(width, height, &rgb);
    let key = sha256_hex(&png);
    ImageArtifact {
        width,
        height,
        bytes: Arc::new(png),
        cache_key: key,
    }
}

/// The request recorded next to every cached image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub model_id: String,
    pub prompt: String,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    /// Run (or image stage) that generated the image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRequest {
    pub prompt: String,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug)]
pub struct Fetched {
    pub image: ImageArtifact,
    pub cache_hit: bool,
    pub retried: bool,
    /// Origin recorded when the image was generated.
    pub origin: Option<String>,
}

/// Content-addressed on-disk image store, safe for concurrent callers.
#[derive(Debug)]
pub struct ImageCache {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes `bytes` to `path` through a temporary file and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().expect("cache paths have a parent");
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.{}.{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("file"),
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

impl ImageCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)
            .map_err(|e| Error::Config(format!("cache dir {}: {e}", dir.display())))?;
        Ok(Self {
            dir,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn png_path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.png"))
    }

    pub fn sidecar_path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    /// Returns the cached image for `key` if present and decodable with the
    /// expected size.
    pub fn get(&self, key: &str, width: u32, height: u32) -> Option<ImageArtifact> {
        let bytes = fs::read(self.png_path(key)).ok()?;
        let img = ImageArtifact::from_png(bytes, key.to_string()).ok()?;
        (img.width == width && img.height == height).then_some(img)
    }

    fn key_lock(&self, key: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().expect("cache lock map");
        locks.entry(key.to_string()).or_default().clone()
    }

    /// Returns the cached image or generates, stores and returns it. Concurrent
    /// misses on one key produce a single generation.
    pub fn fetch_or_generate(&self, req: &ImageRequest, gen: &dyn ImageGenerator) -> Result<Fetched> {
        self.fetch_or_generate_as(req, gen, None)
    }

    /// [`ImageCache::fetch_or_generate`], tagging newly generated images with
    /// `origin`.
    pub fn fetch_or_generate_as(
        &self,
        req: &ImageRequest,
        gen: &dyn ImageGenerator,
        origin: Option<&str>,
    ) -> Result<Fetched> {
        let model_id = gen.model_id();
        let key = cache_key(model_id, &req.prompt, req.seed, req.width, req.height);
        let lock = self.key_lock(&key);
        let _guard = lock.lock().expect("per-key lock");
        if let Some(image) = self.get(&key, req.width, req.height) {
            let origin = fs::read(self.sidecar_path(&key))
                .ok()
                .and_then(|b| serde_json::from_slice::<Sidecar>(&b).ok())
                .and_then(|s| s.origin);
            return Ok(Fetched {
                image,
                cache_hit: true,
                retried: false,
                origin,
            });
        }
        let generated = gen.generate_image(&req.prompt, req.seed, req.width, req.height)?;
        let mut image = generated.value;
        image.cache_key = key.clone();
        let sidecar = Sidecar {
            model_id: model_id.to_string(),
            prompt: req.prompt.clone(),
            seed: req.seed,
            width: req.width,
            height: req.height,
            origin: origin.map(str::to_string),
        };
        write_atomic(&self.sidecar_path(&key), &serde_json::to_vec_pretty(&sidecar)?)?;
        write_atomic(&self.png_path(&key), image.bytes())?;
        Ok(Fetched {
            image,
            cache_hit: false,
            retried: generated.retried,
            origin: origin.map(str::to_string),
        })
    }
}

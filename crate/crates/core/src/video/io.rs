//! Reading and writing clips: image-sequence directories, animated GIF, and
//! any other container through an `ffmpeg` binary on `PATH`.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::Command;

use image::codecs::gif::{GifDecoder, GifEncoder, Repeat};
use image::imageops::{self, FilterType};
use image::{AnimationDecoder, Delay, DynamicImage, Frame, RgbImage, RgbaImage};
use ndarray::{Array3, ArrayView3};
use rayon::prelude::*;

use super::clip::{VideoClip, DEFAULT_FRAME_RATE};
use crate::config::Resolution;
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Target size; `None` keeps each frame's native size.
    pub resolution: Option<Resolution>,
    /// Keep only the first `max_frames` frames.
    pub max_frames: Option<usize>,
}

impl LoadOptions {
    pub fn new(resolution: Resolution) -> Self {
        Self {
            resolution: Some(resolution),
            max_frames: None,
        }
    }

    pub fn native() -> Self {
        Self {
            resolution: None,
            max_frames: None,
        }
    }
}

fn has_ext(path: &Path, exts: &[&str]) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| exts.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

/// Center-crops to the target aspect ratio, then scales to the target size.
pub fn fit_to_resolution(img: &RgbImage, resolution: Resolution) -> RgbImage {
    let (w, h) = img.dimensions();
    let (tw, th) = (resolution.width as u32, resolution.height as u32);
    if (w, h) == (tw, th) {
        return img.clone();
    }
    // crop the largest centered region with aspect tw:th
    let (cw, ch) = if (w as u64) * (th as u64) > (h as u64) * (tw as u64) {
        (((h as u64 * tw as u64) / th as u64).max(1) as u32, h)
    } else {
        (w, ((w as u64 * th as u64) / tw as u64).max(1) as u32)
    };
    let cropped = imageops::crop_imm(img, (w - cw) / 2, (h - ch) / 2, cw, ch).to_image();
    if (cw, ch) == (tw, th) {
        cropped
    } else {
        imageops::resize(&cropped, tw, th, FilterType::CatmullRom)
    }
}

pub fn rgb_to_frame(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

pub fn frame_to_rgb(frame: ArrayView3<'_, f64>) -> RgbImage {
    let (h, w, _) = frame.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (frame[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

fn frames_to_clip(images: Vec<RgbImage>, opts: &LoadOptions, frame_rate: f64) -> Result<VideoClip> {
    let mut images = images;
    if let Some(n) = opts.max_frames {
        images.truncate(n);
    }
    if images.is_empty() {
        return Err(Error::Decode("no frames found".into()));
    }
    let frames: Vec<Array3<f64>> = images
        .par_iter()
        .map(|img| match opts.resolution {
            Some(r) => rgb_to_frame(&fit_to_resolution(img, r)),
            None => rgb_to_frame(img),
        })
        .collect();
    VideoClip::from_frames(&frames, frame_rate)
}

fn open_image(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::Decode(format!("{}: {e}", path.display())))
}

/// Ordered image files of a frame directory (lexicographic by file name).
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && has_ext(p, IMAGE_EXTENSIONS))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads a clip from a frame directory or a video file, normalized to `opts.resolution`.
pub fn load_video(path: &Path, opts: &LoadOptions) -> Result<VideoClip> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "input does not exist"),
        ));
    }
    if path.is_dir() {
        let mut files = list_frame_files(path)?;
        if files.is_empty() {
            return Err(Error::Decode(format!("{}: directory has no image frames", path.display())));
        }
        if let Some(n) = opts.max_frames {
            files.truncate(n);
        }
        let images = files.iter().map(|f| open_image(f)).collect::<Result<Vec<_>>>()?;
        return frames_to_clip(images, opts, DEFAULT_FRAME_RATE);
    }
    if has_ext(path, &["gif"]) {
        return load_gif(path, opts);
    }
    if has_ext(path, IMAGE_EXTENSIONS) {
        return frames_to_clip(vec![open_image(path)?], opts, DEFAULT_FRAME_RATE);
    }
    load_with_ffmpeg(path, opts)
}

fn load_gif(path: &Path, opts: &LoadOptions) -> Result<VideoClip> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = GifDecoder::new(BufReader::new(file)).map_err(|e| Error::Decode(e.to_string()))?;
    let frames = decoder
        .into_frames()
        .collect_frames()
        .map_err(|e| Error::Decode(e.to_string()))?;
    let frame_rate = frames
        .first()
        .map(|f| {
            let (num, den) = f.delay().numer_denom_ms();
            if num == 0 {
                DEFAULT_FRAME_RATE
            } else {
                1000.0 * den as f64 / num as f64
            }
        })
        .unwrap_or(DEFAULT_FRAME_RATE);
    let images = frames
        .into_iter()
        .map(|f| DynamicImage::ImageRgba8(f.into_buffer()).to_rgb8())
        .collect();
    frames_to_clip(images, opts, frame_rate)
}

fn ffmpeg_available() -> bool {
    Command::new("ffmpeg")
        .arg("-version")
        .output()
        .is_ok_and(|o| o.status.success())
}

fn probe_frame_rate(path: &Path) -> Option<f64> {
    let out = Command::new("ffprobe")
        .args(["-v", "error", "-select_streams", "v:0", "-show_entries", "stream=r_frame_rate"])
        .args(["-of", "default=noprint_wrappers=1:nokey=1"])
        .arg(path)
        .output()
        .ok()?;
    let text = String::from_utf8(out.stdout).ok()?;
    let (n, d) = text.trim().split_once('/')?;
    let rate = n.parse::<f64>().ok()? / d.parse::<f64>().ok()?;
    rate.is_finite().then_some(rate)
}

fn load_with_ffmpeg(path: &Path, opts: &LoadOptions) -> Result<VideoClip> {
    if !ffmpeg_available() {
        return Err(Error::Unsupported(format!(
            "{}: only frame directories and GIF are read natively; install ffmpeg for other containers",
            path.display()
        )));
    }
    let tmp = std::env::temp_dir().join(format!("longedit-decode-{}", std::process::id()));
    std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut cmd = Command::new("ffmpeg");
    cmd.args(["-v", "error", "-i"]).arg(path);
    if let Some(n) = opts.max_frames {
        cmd.args(["-frames:v", &n.to_string()]);
    }
    let status = cmd
        .arg(tmp.join("frame_%06d.png"))
        .status()
        .map_err(|e| Error::io(path, e))?;
    let result = if status.success() {
        let files = list_frame_files(&tmp)?;
        files
            .iter()
            .map(|f| open_image(f))
            .collect::<Result<Vec<_>>>()
            .and_then(|imgs| frames_to_clip(imgs, opts, probe_frame_rate(path).unwrap_or(DEFAULT_FRAME_RATE)))
    } else {
        Err(Error::Decode(format!("ffmpeg could not decode {}", path.display())))
    };
    let _ = std::fs::remove_dir_all(&tmp);
    result
}

/// Writes every frame as `frame_00000.png`, ... into `dir`.
pub fn save_frames(clip: &VideoClip, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..clip.len())
        .into_par_iter()
        .map(|k| {
            let p = dir.join(format!("frame_{k:05}.png"));
            frame_to_rgb(clip.frame(k))
                .save(&p)
                .map_err(|e| Error::Decode(format!("{}: {e}", p.display())))?;
            Ok(p)
        })
        .collect()
}

/// Writes a clip as GIF, as a frame directory (no extension), or through ffmpeg.
pub fn save_video(clip: &VideoClip, path: &Path) -> Result<()> {
    if path.extension().is_none() {
        return save_frames(clip, path).map(|_| ());
    }
    if has_ext(path, &["gif"]) {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = GifEncoder::new_with_speed(file, 10);
        enc.set_repeat(Repeat::Infinite)
            .map_err(|e| Error::Decode(e.to_string()))?;
        let delay = Delay::from_numer_denom_ms((1000.0 / clip.frame_rate()).round() as u32, 1);
        for k in 0..clip.len() {
            let rgba: RgbaImage = DynamicImage::ImageRgb8(frame_to_rgb(clip.frame(k))).to_rgba8();
            enc.encode_frame(Frame::from_parts(rgba, 0, 0, delay))
                .map_err(|e| Error::Decode(e.to_string()))?;
        }
        return Ok(());
    }
    if !ffmpeg_available() {
        return Err(Error::Unsupported(format!(
            "{}: writing this container needs ffmpeg; use .gif or a directory",
            path.display()
        )));
    }
    let tmp = std::env::temp_dir().join(format!("longedit-encode-{}", std::process::id()));
    save_frames(clip, &tmp)?;
    let status = Command::new("ffmpeg")
        .args(["-v", "error", "-y", "-framerate", &clip.frame_rate().to_string(), "-i"])
        .arg(tmp.join("frame_%05d.png"))
        .args(["-pix_fmt", "yuv420p"])
        .arg(path)
        .status()
        .map_err(|e| Error::io(path, e));
    let _ = std::fs::remove_dir_all(&tmp);
    if status?.success() {
        Ok(())
    } else {
        Err(Error::Decode(format!("ffmpeg could not encode {}", path.display())))
    }
}

/// Indices of `n` frames evenly spread over `len` frames, first and last included.
pub fn evenly_sampled(len: usize, n: usize) -> Vec<usize> {
    let n = n.min(len);
    match n {
        0 => vec![],
        1 => vec![0],
        _ => (0..n)
            .map(|k| ((k * (len - 1)) as f64 / (n - 1) as f64).round() as usize)
            .collect(),
    }
}

/// Writes an image, format chosen by extension.
pub fn save_image(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::Decode(format!("{}: {e}", path.display())))
}

/// Side-by-side strip of `n` evenly sampled frames.
pub fn frame_grid(clip: &VideoClip, n: usize) -> RgbImage {
    let (h, w) = clip.size();
    let picks = evenly_sampled(clip.len(), n.max(1));
    let mut grid = RgbImage::new((w * picks.len()) as u32, h as u32);
    for (slot, &k) in picks.iter().enumerate() {
        imageops::replace(&mut grid, &frame_to_rgb(clip.frame(k)), (slot * w) as i64, 0);
    }
    grid
}

//! Per-frame structural control maps.
//!
//! Canny edges are computed here; HED boundaries and depth come from external
//! models behind [`ControlModel`].

use std::collections::VecDeque;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;

use crate::config::{CannySettings, ControlType};
use crate::error::{Error, Result};
use crate::video::VideoClip;

/// Control maps `[M, H, W, C]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    maps: Array4<f64>,
    control_type: ControlType,
}

impl ControlSignal {
    pub fn new(maps: Array4<f64>, control_type: ControlType) -> Result<Self> {
        if let Some(v) = maps.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange {
                what: "control value",
                detail: format!("{v} is outside [0, 1]"),
            });
        }
        Ok(Self { maps, control_type })
    }

    pub fn maps(&self) -> &Array4<f64> {
        &self.maps
    }

    pub fn frame(&self, index: usize) -> ArrayView3<'_, f64> {
        self.maps.index_axis(Axis(0), index)
    }

    pub fn len(&self) -> usize {
        self.maps.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn control_type(&self) -> ControlType {
        self.control_type
    }

    /// Writes the first channel of each map as a grayscale PNG.
    pub fn save_images(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for k in 0..self.len() {
            let m = self.frame(k);
            let (h, w, _) = m.dim();
            let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([(m[[y as usize, x as usize, 0]] * 255.0).round() as u8])
            });
            let p = dir.join(format!("control_{k:05}.png"));
            img.save(&p).map_err(|e| Error::Decode(format!("{}: {e}", p.display())))?;
        }
        Ok(())
    }
}

pub fn luminance(frame: ArrayView3<'_, f64>) -> Array2<f64> {
    let (h, w, _) = frame.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * frame[[y, x, 0]] + 0.587 * frame[[y, x, 1]] + 0.114 * frame[[y, x, 2]]
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

fn clamped(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(img: ArrayView2<'_, f64>, sigma: f64) -> Array2<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = img.dim();
    let rows: Array2<f64> = Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * img[[y, clamped(x as isize + i as isize - r, w)]])
            .sum()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * rows[[clamped(y as isize + i as isize - r, h), x]])
            .sum()
    })
}

/// Upper bound of the Sobel magnitude on `[0, 1]` images.
const SOBEL_MAX: f64 = 4.0 * std::f64::consts::SQRT_2;

/// Sobel gradients `(gx, gy)` with replicated borders.
pub fn sobel(img: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = img.dim();
    let at = |y: usize, x: usize, dy: isize, dx: isize| img[[clamped(y as isize + dy, h), clamped(x as isize + dx, w)]];
    let gx = Array2::from_shape_fn((h, w), |(y, x)| {
        (at(y, x, -1, 1) + 2.0 * at(y, x, 0, 1) + at(y, x, 1, 1))
            - (at(y, x, -1, -1) + 2.0 * at(y, x, 0, -1) + at(y, x, 1, -1))
    });
    let gy = Array2::from_shape_fn((h, w), |(y, x)| {
        (at(y, x, 1, -1) + 2.0 * at(y, x, 1, 0) + at(y, x, 1, 1))
            - (at(y, x, -1, -1) + 2.0 * at(y, x, -1, 0) + at(y, x, -1, 1))
    });
    (gx, gy)
}

fn non_max_suppression(mag: &Array2<f64>, gx: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
    let (h, w) = mag.dim();
    let get = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[[y as usize, x as usize]]
        }
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let m = mag[[y, x]];
        if m <= 0.0 {
            return 0.0;
        }
        let mut angle = gy[[y, x]].atan2(gx[[y, x]]).to_degrees();
        if angle < 0.0 {
            angle += 180.0;
        }
        let (dy, dx) = if !(22.5..157.5).contains(&angle) {
            (0, 1)
        } else if angle < 67.5 {
            (1, 1)
        } else if angle < 112.5 {
            (1, 0)
        } else {
            (1, -1)
        };
        let (yi, xi) = (y as isize, x as isize);
        let before = get(yi - dy, xi - dx);
        let after = get(yi + dy, xi + dx);
        // strict on one side so a plateau of two keeps exactly one pixel
        if m > before && m >= after {
            m
        } else {
            0.0
        }
    })
}

fn hysteresis(nms: &Array2<f64>, low: f64, high: f64) -> Array2<f64> {
    let (h, w) = nms.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    let mut queue: VecDeque<(usize, usize)> = nms
        .indexed_iter()
        .filter(|(_, v)| **v >= high)
        .map(|(p, _)| p)
        .collect();
    for &(y, x) in &queue {
        out[[y, x]] = 1.0;
    }
    while let Some((y, x)) = queue.pop_front() {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if out[[ny, nx]] == 0.0 && nms[[ny, nx]] >= low {
                    out[[ny, nx]] = 1.0;
                    queue.push_back((ny, nx));
                }
            }
        }
    }
    out
}

fn check_thresholds(low: f64, high: f64) -> Result<()> {
    if low > 0.0 && low < high {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "canny thresholds must satisfy 0 < low < high, got ({low}, {high})"
        )))
    }
}

/// Binary Canny edge map `[H, W]` of one frame.
pub fn canny_frame(frame: ArrayView3<'_, f64>, settings: &CannySettings) -> Result<Array2<f64>> {
    check_thresholds(settings.low_threshold, settings.high_threshold)?;
    if !(settings.blur_sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("blur sigma must be positive, got {}", settings.blur_sigma)));
    }
    let blurred = gaussian_blur(luminance(frame).view(), settings.blur_sigma);
    let (gx, gy) = sobel(blurred.view());
    let mag = ndarray::Zip::from(&gx)
        .and(&gy)
        .map_collect(|a, b| (a * a + b * b).sqrt() / SOBEL_MAX);
    let nms = non_max_suppression(&mag, &gx, &gy);
    Ok(hysteresis(&nms, settings.low_threshold, settings.high_threshold))
}

/// Canny maps for every frame, broadcast to three channels.
pub fn canny_maps(clip: &VideoClip, settings: &CannySettings) -> Result<ControlSignal> {
    check_thresholds(settings.low_threshold, settings.high_threshold)?;
    let (h, w) = clip.size();
    let edges: Vec<Array2<f64>> = (0..clip.len())
        .into_par_iter()
        .map(|k| canny_frame(clip.frame(k), settings))
        .collect::<Result<_>>()?;
    let mut maps = Array4::<f64>::zeros((clip.len(), h, w, 3));
    for (k, e) in edges.iter().enumerate() {
        for c in 0..3 {
            maps.index_axis_mut(Axis(0), k)
                .index_axis_mut(Axis(2), c)
                .assign(e);
        }
    }
    ControlSignal::new(maps, ControlType::Canny)
}

/// A pretrained frame-to-map model (HED, depth, ...).
pub trait ControlModel: Send + Sync {
    fn id(&self) -> String;

    fn control_type(&self) -> ControlType;

    /// Map `[H, W, C]` for a frame `[H, W, 3]`.
    fn infer(&self, frame: ArrayView3<'_, f64>) -> Result<Array3<f64>>;
}

/// Luminance as a one-channel map.
#[derive(Debug, Clone, Copy)]
pub struct LuminanceControl(pub ControlType);

impl ControlModel for LuminanceControl {
    fn id(&self) -> String {
        "luminance".into()
    }

    fn control_type(&self) -> ControlType {
        self.0
    }

    fn infer(&self, frame: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        Ok(luminance(frame).insert_axis(Axis(2)))
    }
}

/// Runs an external control model on every frame, clipping its output to `[0, 1]`.
pub fn external_control(clip: &VideoClip, model: &dyn ControlModel) -> Result<ControlSignal> {
    let (h, w) = clip.size();
    let maps: Vec<Array3<f64>> = (0..clip.len())
        .into_par_iter()
        .map(|k| {
            let m = model.infer(clip.frame(k)).map_err(|e| Error::Adapter {
                frame: k,
                message: e.to_string(),
            })?;
            let (mh, mw, mc) = m.dim();
            if (mh, mw) != (h, w) || mc == 0 {
                return Err(Error::Adapter {
                    frame: k,
                    message: format!("map is {mh}x{mw}x{mc}, frames are {h}x{w}"),
                });
            }
            Ok(m.mapv(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
        })
        .collect::<Result<_>>()?;
    let c = maps[0].dim().2;
    if let Some(k) = maps.iter().position(|m| m.dim().2 != c) {
        return Err(Error::Adapter {
            frame: k,
            message: format!("channel count {} differs from {c}", maps[k].dim().2),
        });
    }
    let views: Vec<_> = maps.iter().map(|m| m.view().insert_axis(Axis(0))).collect();
    let stacked = ndarray::concatenate(Axis(0), &views).expect("shapes checked");
    ControlSignal::new(stacked, model.control_type())
}

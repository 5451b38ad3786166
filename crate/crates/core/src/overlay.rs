//! PPM overlays of heatmaps and boxes on top of input images.

use std::path::{Path, PathBuf};

use crate::data::{Dataset, Scenario, Split};
use crate::model::Model;
use crate::stn::{self, BBoxParams};
use crate::tensor::Tensor;
use crate::train::predict;
use crate::{Error, Result};

pub const PRED_COLOR: [u8; 3] = [255, 0, 0];
pub const TRUTH_COLOR: [u8; 3] = [0, 255, 0];
/// Weight of the heatmap in the blue channel.
pub const HEAT_BLEND: f64 = 0.6;

/// RGB image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Rgb {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Rgb {
    /// Binary P6 encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }

    fn outline(&mut self, b: &BBoxParams, color: [u8; 3]) {
        let (r0, r1, c0, c1) = b.extent();
        let to_px = |v: f64, n: usize| {
            ((v + 1.0) * (n - 1) as f64 / 2.0)
                .round()
                .clamp(0.0, (n - 1) as f64) as usize
        };
        let (r0, r1) = (to_px(r0, self.height), to_px(r1, self.height));
        let (c0, c1) = (to_px(c0, self.width), to_px(c1, self.width));
        for c in c0..=c1 {
            self.pixels[r0 * self.width + c] = color;
            self.pixels[r1 * self.width + c] = color;
        }
        for r in r0..=r1 {
            self.pixels[r * self.width + c0] = color;
            self.pixels[r * self.width + c1] = color;
        }
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale `image` (`1×H×W`) upscaled by `scale`, with an optional
/// `s×s` heatmap stretched to `[0, 1]` and blended into blue, then the
/// predicted box in red and the ground truth in green.
pub fn render(
    image: &Tensor,
    heatmap: Option<(&[f64], usize)>,
    pred: Option<&BBoxParams>,
    truth: &BBoxParams,
    scale: usize,
) -> Result<Rgb> {
    if image.rank() != 3 || image.shape()[0] != 1 || scale == 0 {
        return Err(Error::dim(
            "render",
            format!("image {:?} at scale {scale}", image.shape()),
        ));
    }
    let (h, w) = (image.shape()[1] * scale, image.shape()[2] * scale);
    let base = stn::resize(image, h, w)?;
    let heat = match heatmap {
        Some((map, s)) => {
            let t = Tensor::new(vec![1, s, s], map.to_vec())?;
            let r = stn::resize(&t, h, w)?.into_data();
            let (lo, hi) = r.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &v| {
                (a.0.min(v), a.1.max(v))
            });
            let span = if hi > lo { hi - lo } else { 1.0 };
            Some(r.into_iter().map(|v| (v - lo) / span).collect::<Vec<_>>())
        }
        None => None,
    };
    let pixels = base
        .data()
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let g = g.clamp(0.0, 1.0);
            match &heat {
                Some(m) => {
                    let k = HEAT_BLEND * m[i];
                    [
                        to_byte(g * (1.0 - k)),
                        to_byte(g * (1.0 - k)),
                        to_byte(g * (1.0 - k) + k),
                    ]
                }
                None => [to_byte(g); 3],
            }
        })
        .collect();
    let mut rgb = Rgb {
        height: h,
        width: w,
        pixels,
    };
    if let Some(p) = pred {
        rgb.outline(p, PRED_COLOR);
    }
    rgb.outline(truth, TRUTH_COLOR);
    Ok(rgb)
}

/// Writes one overlay per fractured test sample into `dir` and returns the
/// paths. Schemes without a localizer are refused.
pub fn export(
    model: &Model,
    data: &Dataset,
    dir: impl AsRef<Path>,
    scale: usize,
) -> Result<Vec<PathBuf>> {
    let scheme = model.config.scheme;
    if !scheme.localizes() {
        return Err(Error::Usage(format!(
            "scheme {scheme} produces no localization to overlay"
        )));
    }
    let scenario = Scenario::from_classes(model.config.classes)?;
    let samples: Vec<_> = data
        .split_samples(Split::Test)
        .into_iter()
        .filter(|s| scenario.includes(s.label6) && s.label6.is_fracture())
        .collect();
    let preds = predict(model, &samples, scenario)?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let heat = preds.heatmaps.as_ref().map(|m| {
            let s = (m[i].len() as f64).sqrt().round() as usize;
            (m[i].as_slice(), s)
        });
        let pred = preds.boxes.as_ref().map(|b| &b[i].0);
        let rgb = render(&s.image, heat, pred, &s.roi, scale)?;
        let path = dir.join(format!("sample_{:05}_{}.ppm", s.index, s.label6.name()));
        std::fs::write(&path, rgb.to_ppm()).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_layout_and_colors() {
        let img = Tensor::full(&[1, 8, 8], 0.5);
        let rgb = render(
            &img,
            None,
            Some(&BBoxParams::new(0.0, 0.0, 0.5)),
            &BBoxParams::FULL,
            2,
        )
        .unwrap();
        assert_eq!((rgb.height, rgb.width), (16, 16));
        assert_eq!(rgb.pixels[0], TRUTH_COLOR);
        assert!(rgb.pixels.contains(&PRED_COLOR));
        assert_eq!(rgb.pixels[16 * 8 + 8], [128, 128, 128]);
        let ppm = rgb.to_ppm();
        assert!(ppm.starts_with(b"P6\n16 16\n255\n"));
        assert_eq!(ppm.len(), 13 + 16 * 16 * 3);
    }

    #[test]
    fn heatmap_goes_to_blue() {
        let img = Tensor::zeros(&[1, 4, 4]);
        let map = [0.0, 0.0, 0.0, 1.0];
        let rgb = render(
            &img,
            Some((&map, 2)),
            None,
            &BBoxParams::new(-1.0, -1.0, 0.01),
            1,
        )
        .unwrap();
        assert_eq!(rgb.pixels[0], TRUTH_COLOR);
        assert_eq!(rgb.pixels[15], [0, 0, to_byte(HEAT_BLEND)]);
        assert_eq!(rgb.pixels[5], [0, 0, to_byte(HEAT_BLEND / 9.0)]);
    }
}

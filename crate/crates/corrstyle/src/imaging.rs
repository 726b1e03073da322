//! Minimal planar RGB image type used throughout the pipeline.
//!
//! Images are stored as `(3, h, w)` f32 arrays with values in `[0, 1]`.

use std::path::Path;

use ndarray::{Array2, Array3, Zip};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    data: Array3<f32>,
}

impl RgbImage {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.shape()[0] != 3 {
            return Err(Error::shape(
                "RgbImage::new",
                "(3, h, w)",
                format!("{:?}", data.shape()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "RgbImage::new".into(),
                timestep: 0,
            });
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((3, height, width)),
        }
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn clamp_unit(mut self) -> Self {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        self
    }

    /// ITU-R BT.601 luminance.
    pub fn luminance(&self) -> Array2<f32> {
        let (h, w) = (self.height(), self.width());
        let mut out = Array2::zeros((h, w));
        let r = self.data.index_axis(ndarray::Axis(0), 0);
        let g = self.data.index_axis(ndarray::Axis(0), 1);
        let b = self.data.index_axis(ndarray::Axis(0), 2);
        Zip::from(&mut out).and(&r).and(&g).and(&b).for_each(|o, &r, &g, &b| {
            *o = 0.299 * r + 0.587 * g + 0.114 * b;
        });
        out
    }

    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        if height == self.height() && width == self.width() {
            return self.clone();
        }
        let mut out = Array3::zeros((3, height, width));
        let sy = self.height() as f32 / height as f32;
        let sx = self.width() as f32 / width as f32;
        for c in 0..3 {
            for y in 0..height {
                let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, self.height() as f32 - 1.0);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(self.height() - 1);
                let wy = fy - y0 as f32;
                for x in 0..width {
                    let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, self.width() as f32 - 1.0);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(self.width() - 1);
                    let wx = fx - x0 as f32;
                    let v00 = self.data[[c, y0, x0]];
                    let v01 = self.data[[c, y0, x1]];
                    let v10 = self.data[[c, y1, x0]];
                    let v11 = self.data[[c, y1, x1]];
                    out[[c, y, x]] = v00 * (1.0 - wy) * (1.0 - wx)
                        + v01 * (1.0 - wy) * wx
                        + v10 * wy * (1.0 - wx)
                        + v11 * wy * wx;
                }
            }
        }
        Self { data: out }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = Array3::zeros((3, h, w));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[c, y as usize, x as usize]] = px.0[c] as f32 / 255.0;
            }
        }
        Ok(Self { data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    (self.data[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (self.data[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (self.data[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                ];
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        crate::pipeline::record::atomic_write(path.as_ref(), |tmp| {
            buf.save_with_format(tmp, image::ImageFormat::Png)
                .map_err(Error::from)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luminance_of_white_is_one() {
        let mut img = RgbImage::zeros(4, 4);
        img.data_mut().fill(1.0);
        let y = img.luminance();
        assert!(y.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn resize_preserves_constant_images() {
        let mut img = RgbImage::zeros(8, 8);
        img.data_mut().fill(0.25);
        let r = img.resize_bilinear(5, 11);
        assert_eq!(r.height(), 5);
        assert_eq!(r.width(), 11);
        assert!(r.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let arr = Array3::<f32>::zeros((4, 2, 2));
        assert!(RgbImage::new(arr).is_err());
    }
}

//! Image-domain samples.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `h × w × c` image with values in `[-1, 1]`, stored row-major in HWC order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels || height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape {
                op: "image",
                detail: format!("{height}x{width}x{channels} vs {} values", data.len()),
            });
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, color: &[f32]) -> Self {
        let mut data = Vec::with_capacity(height * width * color.len());
        for _ in 0..height * width {
            data.extend_from_slice(color);
        }
        ImageTensor {
            height,
            width,
            channels: color.len(),
            data,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Channel-major `[1, C, H, W]` tensor for the networks.
    pub fn to_nchw<T: Real>(&self) -> Tensor<T> {
        Self::batch_to_nchw(std::slice::from_ref(self)).expect("single image batch")
    }

    /// Stacks equally sized images into `[N, C, H, W]`.
    pub fn batch_to_nchw<T: Real>(images: &[ImageTensor]) -> Result<Tensor<T>> {
        let first = images.first().ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
        let (h, w, c) = (first.height, first.width, first.channels);
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if (img.height, img.width, img.channels) != (h, w, c) {
                return Err(Error::Shape {
                    op: "image batch",
                    detail: format!(
                        "{}x{}x{} vs {h}x{w}x{c}",
                        img.height, img.width, img.channels
                    ),
                });
            }
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(T::lit(img.get(y, x, ch) as f64));
                    }
                }
            }
        }
        Tensor::new(vec![images.len(), c, h, w], data)
    }

    /// Splits a `[N, C, H, W]` tensor back into HWC images.
    pub fn from_nchw<T: Real>(t: &Tensor<T>) -> Result<Vec<ImageTensor>> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::Shape {
                op: "from_nchw",
                detail: format!("{s:?}"),
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let d = t.data();
        Ok((0..n)
            .map(|b| {
                let mut img = ImageTensor::filled(h, w, &vec![0.0; c]);
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            img.set(y, x, ch, d[((b * c + ch) * h + y) * w + x].as_f64() as f32);
                        }
                    }
                }
                img
            })
            .collect())
    }

    /// Tiles the image `ny × nx` times.
    pub fn tile(&self, ny: usize, nx: usize) -> ImageTensor {
        let mut out = ImageTensor::filled(self.height * ny, self.width * nx, &vec![0.0; self.channels]);
        for y in 0..out.height {
            for x in 0..out.width {
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(y % self.height, x % self.width, c));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nchw_round_trip() {
        let data: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32 / 24.0).collect();
        let img = ImageTensor::new(2, 3, 4, data).unwrap();
        let t: Tensor<f32> = img.to_nchw();
        assert_eq!(t.shape(), &[1, 4, 2, 3]);
        assert_eq!(t.data()[1], img.get(0, 1, 0));
        let back = ImageTensor::from_nchw(&t).unwrap();
        assert_eq!(back[0], img);
    }

    #[test]
    fn tiling_repeats_content() {
        let img = ImageTensor::new(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let t = img.tile(2, 2);
        assert_eq!((t.height, t.width), (4, 4));
        assert_eq!(t.get(3, 2, 0), 0.3);
    }
}

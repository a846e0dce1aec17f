//! Per-sample images in height × width × channel layout and their
//! conversion to NCHW batches.

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Real-valued image, row-major HWC. Network inputs are normalised to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![v; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    /// Packs samples of identical shape into an NCHW batch.
    pub fn batch<T: Scalar>(images: &[ImageTensor]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("empty image batch".into()))?;
        let [h, w, c] = first.shape();
        let mut out = Tensor::zeros(images.len(), c, h, w);
        for (i, img) in images.iter().enumerate() {
            if img.shape() != first.shape() {
                return Err(Error::Shape(format!(
                    "batch mixes {:?} and {:?} images",
                    first.shape(),
                    img.shape()
                )));
            }
            let dst = out.sample_mut(i);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        dst[(ch * h + y) * w + x] = T::from_f64(img.at(y, x, ch) as f64);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Extracts sample `i` of an NCHW batch.
    pub fn from_batch<T: Scalar>(t: &Tensor<T>, i: usize) -> Self {
        let src = t.sample(i);
        let mut data = vec![0.0f32; t.sample_len()];
        for ch in 0..t.c {
            for y in 0..t.h {
                for x in 0..t.w {
                    data[(y * t.w + x) * t.c + ch] = src[(ch * t.h + y) * t.w + x].as_f64() as f32;
                }
            }
        }
        Self {
            height: t.h,
            width: t.w,
            channels: t.c,
            data,
        }
    }
}

/// The spoof cue `C`: same shape as its source image, entries in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CueMap(pub ImageTensor);

impl CueMap {
    pub fn image(&self) -> &ImageTensor {
        &self.0
    }

    pub fn values(&self) -> &[f32] {
        &self.0.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_round_trip() {
        let a = ImageTensor::new(2, 3, 3, (0..18).map(|v| v as f32).collect()).unwrap();
        let b = ImageTensor::filled(2, 3, 3, -0.5);
        let t = ImageTensor::batch::<f32>(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(t.shape(), [2, 3, 2, 3]);
        // channel 1 of pixel (0, 1) is element 4 of the HWC buffer
        assert_eq!(t.data[6 + 1], 4.0);
        assert_eq!(ImageTensor::from_batch(&t, 0), a);
        assert_eq!(ImageTensor::from_batch(&t, 1), b);
    }

    #[test]
    fn mismatched_batch_rejected() {
        let a = ImageTensor::filled(2, 2, 3, 0.0);
        let b = ImageTensor::filled(4, 4, 3, 0.0);
        assert!(ImageTensor::batch::<f32>(&[a, b]).is_err());
        assert!(ImageTensor::new(2, 2, 3, vec![0.0; 5]).is_err());
    }
}

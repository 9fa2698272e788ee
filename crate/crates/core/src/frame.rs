use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channel-first camera image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Frame<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!("empty frame {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "frame {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::invalid(format!("frame value {bad} outside [0, 1]")));
        }
        Ok(Frame {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    /// Builds a frame from a `[C, H, W]` or `[1, C, H, W]` tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = match *t.shape() {
            [c, h, w] | [1, c, h, w] => (c, h, w),
            ref s => return Err(Error::invalid(format!("frame tensor shape {s:?}"))),
        };
        let data = t.data().iter().map(|v| v.max(T::zero()).min(T::one())).collect();
        Self::new(c, h, w, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.channels, self.height, self.width], self.data.clone())
            .expect("frame dims are consistent")
    }

    pub fn cast<U: Scalar>(&self) -> Frame<U> {
        Frame {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Stacks equally sized frames into an `[N, C, H, W]` tensor.
    pub fn batch<U: Scalar>(frames: &[&Frame<T>]) -> Result<Tensor<U>> {
        let first = frames.first().ok_or_else(|| Error::invalid("empty frame batch"))?;
        let dims = first.dims();
        let mut data = Vec::with_capacity(frames.len() * first.data.len());
        for f in frames {
            if f.dims() != dims {
                return Err(Error::invalid(format!("frame {:?} in batch of {:?}", f.dims(), dims)));
            }
            data.extend(f.data.iter().map(|v| U::of(v.as_f64())));
        }
        Tensor::from_vec(&[frames.len(), dims.0, dims.1, dims.2], data)
    }

    /// Bilinear resampling (pixel-centre aligned).
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("resize to empty frame"));
        }
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            let p = self.plane(c);
            for y in 0..height {
                let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(self.height - 1);
                let ty = fy - y0 as f64;
                for x in 0..width {
                    let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(self.width - 1);
                    let tx = fx - x0 as f64;
                    let at = |yy: usize, xx: usize| p[yy * self.width + xx].as_f64();
                    let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                    let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                    data.push(T::of((top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0)));
                }
            }
        }
        Self::new(self.channels, height, width, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_values() {
        assert!(Frame::<f32>::new(1, 1, 2, vec![0.5, 1.5]).is_err());
        assert!(Frame::<f32>::new(1, 1, 2, vec![0.5, f32::NAN]).is_err());
        assert!(Frame::<f32>::new(1, 1, 2, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn resize_constant_frame_stays_constant() {
        let f = Frame::<f32>::filled(3, 8, 10, 0.25).unwrap();
        let r = f.resize(4, 4).unwrap();
        assert_eq!(r.dims(), (3, 4, 4));
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }
}

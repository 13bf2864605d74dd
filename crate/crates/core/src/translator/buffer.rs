use candle_core::Tensor;
use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_CAPACITY: usize = 50;

/// Where the image returned by [`ImageBuffer::query`] came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Drawn {
    /// Buffer not full yet; the fresh image was stored and returned.
    Stored,
    /// Buffer full; the fresh image was returned and nothing changed.
    Fresh,
    /// Buffer full; the image in this slot was returned and overwritten.
    History(usize),
}

/// Bounded history of generated images used to update discriminators.
#[derive(Clone, Debug)]
pub struct ImageBuffer {
    capacity: usize,
    storage: Vec<Tensor>,
}

impl ImageBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            storage: Vec::with_capacity(capacity),
        }
    }

    /// Rebuilds a buffer from stored `(C, H, W)` images, e.g. from a checkpoint.
    pub fn from_images(capacity: usize, images: Vec<Tensor>) -> Result<Self> {
        if images.len() > capacity {
            return Err(Error::Checkpoint(format!(
                "buffer holds {} images but capacity is {capacity}",
                images.len()
            )));
        }
        Ok(Self {
            capacity,
            storage: images,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.storage.len() >= self.capacity
    }

    pub fn images(&self) -> &[Tensor] {
        &self.storage
    }

    /// Pushes one `(C, H, W)` image and returns the image to show the discriminator.
    pub fn query<R: Rng + ?Sized>(&mut self, fresh: &Tensor, rng: &mut R) -> Result<(Tensor, Drawn)> {
        let fresh = fresh.detach().copy()?;
        if self.capacity == 0 {
            return Ok((fresh, Drawn::Fresh));
        }
        if self.storage.len() < self.capacity {
            self.storage.push(fresh.clone());
            return Ok((fresh, Drawn::Stored));
        }
        if rng.gen::<f64>() < 0.5 {
            let slot = rng.gen_range(0..self.storage.len());
            let old = std::mem::replace(&mut self.storage[slot], fresh);
            Ok((old, Drawn::History(slot)))
        } else {
            Ok((fresh, Drawn::Fresh))
        }
    }

    /// Applies [`query`](Self::query) to every image of a `(B, C, H, W)` batch.
    pub fn query_batch<R: Rng + ?Sized>(&mut self, batch: &Tensor, rng: &mut R) -> Result<Tensor> {
        let n = batch.dim(0)?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(self.query(&batch.get(i)?, rng)?.0);
        }
        Ok(Tensor::stack(&out, 0)?)
    }
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device};

    use super::*;
    use crate::seed::rng_for;

    fn img(v: f64) -> Tensor {
        Tensor::full(v, (1, 2, 2), &Device::Cpu).unwrap().to_dtype(DType::F32).unwrap()
    }

    fn value(t: &Tensor) -> f32 {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap()[0]
    }

    #[test]
    fn fills_before_swapping() {
        let mut buf = ImageBuffer::new(DEFAULT_CAPACITY);
        let mut rng = rng_for(1, "buffer", 0);
        for i in 0..DEFAULT_CAPACITY {
            let (out, drawn) = buf.query(&img(i as f64), &mut rng).unwrap();
            assert_eq!(drawn, Drawn::Stored);
            assert_eq!(value(&out), i as f32);
        }
        assert!(buf.is_full());
    }

    #[test]
    fn history_draw_returns_previous_and_stores_fresh() {
        let mut buf = ImageBuffer::new(3);
        let mut rng = rng_for(2, "buffer", 0);
        for i in 0..3 {
            buf.query(&img(i as f64), &mut rng).unwrap();
        }
        let mut step = 10.0;
        loop {
            let before: Vec<f32> = buf.images().iter().map(value).collect();
            let (out, drawn) = buf.query(&img(step), &mut rng).unwrap();
            if let Drawn::History(slot) = drawn {
                assert_eq!(value(&out), before[slot]);
                assert_eq!(value(&buf.images()[slot]), step as f32);
                break;
            }
            assert_eq!(value(&out), step as f32);
            step += 1.0;
        }
        assert_eq!(buf.len(), 3);
    }

    #[test]
    fn stored_copies_are_decoupled() {
        let mut buf = ImageBuffer::new(2);
        let mut rng = rng_for(3, "buffer", 0);
        let v = candle_core::Var::from_tensor(&img(1.0)).unwrap();
        buf.query(v.as_tensor(), &mut rng).unwrap();
        v.set(&img(5.0)).unwrap();
        assert_eq!(value(&buf.images()[0]), 1.0);
    }

    #[test]
    fn zero_capacity_passes_through() {
        let mut buf = ImageBuffer::new(0);
        let mut rng = rng_for(4, "buffer", 0);
        let (out, drawn) = buf.query(&img(0.5), &mut rng).unwrap();
        assert_eq!((value(&out), drawn), (0.5, Drawn::Fresh));
        assert!(buf.is_empty());
    }

    #[test]
    fn reproducible_given_seed() {
        let run = || {
            let mut buf = ImageBuffer::new(4);
            let mut rng = rng_for(9, "buffer", 0);
            (0..40).map(|i| value(&buf.query(&img(i as f64), &mut rng).unwrap().0)).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn batch_query_keeps_shape() {
        let mut buf = ImageBuffer::new(5);
        let mut rng = rng_for(5, "buffer", 0);
        let batch = Tensor::zeros((3, 1, 2, 2), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(buf.query_batch(&batch, &mut rng).unwrap().dims(), &[3, 1, 2, 2]);
        assert_eq!(buf.len(), 3);
    }
}

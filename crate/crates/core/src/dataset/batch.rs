use rand::seq::SliceRandom;

use super::Example;
use crate::seed;

/// Model-ready batch: images as unit-scaled `N × H × W × 3` floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub height: usize,
    pub width: usize,
    pub images: Vec<f32>,
    /// `N × max_len` token ids.
    pub tokens: Vec<u8>,
    pub max_len: usize,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
    /// Positions of the examples in the source slice.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[Example], indices: &[usize]) -> Self {
        let first = &examples[indices[0]];
        let (h, w) = (first.image.height, first.image.width);
        let max_len = first.tokens.ids.len();
        let mut images = Vec::with_capacity(indices.len() * h * w * 3);
        let mut tokens = Vec::with_capacity(indices.len() * max_len);
        let mut lengths = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let ex = &examples[i];
            images.extend(ex.image.data.iter().map(|&b| b as f32 / 255.0));
            tokens.extend_from_slice(&ex.tokens.ids);
            lengths.push(ex.tokens.len);
            labels.push(ex.label as usize);
        }
        Batch {
            size: indices.len(),
            height: h,
            width: w,
            images,
            tokens,
            max_len,
            lengths,
            labels,
            indices: indices.to_vec(),
        }
    }
}

/// One epoch over `examples` in a seed-determined order. The final short
/// batch is dropped.
pub struct BatchIter<'a> {
    examples: &'a [Example],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batch_iterator(examples: &[Example], batch_size: usize, epoch_seed: u64) -> BatchIter<'_> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut seed::rng(epoch_seed));
    BatchIter {
        examples,
        order,
        batch_size,
        pos: 0,
    }
}

impl BatchIter<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.batch_size
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos + self.batch_size > self.order.len() {
            return None;
        }
        let idx = &self.order[self.pos..self.pos + self.batch_size];
        self.pos += self.batch_size;
        Some(Batch::from_examples(self.examples, idx))
    }
}

/// Sequential batches covering every example, including a short last one.
pub fn eval_batches(examples: &[Example], batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
    let n = examples.len();
    (0..n.div_ceil(batch_size)).map(move |b| {
        let idx: Vec<usize> = (b * batch_size..((b + 1) * batch_size).min(n)).collect();
        Batch::from_examples(examples, &idx)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::Encoded;
    use crate::scene::Image;

    fn fake(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                image: Image {
                    width: 2,
                    height: 2,
                    data: vec![(i % 256) as u8; 12],
                },
                tokens: Encoded {
                    ids: vec![1, 2, 0, 0],
                    len: 2,
                },
                label: i % 2 == 0,
                scene_seed: i as u32,
                caption_seed: 0,
            })
            .collect()
    }

    #[test]
    fn epoch_arithmetic() {
        let ex = fake(640);
        assert_eq!(batch_iterator(&ex, 64, 1).count(), 10);
        let ex = fake(650);
        assert_eq!(batch_iterator(&ex, 64, 1).count(), 10);
        assert_eq!(eval_batches(&ex, 64).map(|b| b.size).sum::<usize>(), 650);
    }

    #[test]
    fn permutation_is_seeded() {
        let ex = fake(100);
        let a = batch_iterator(&ex, 10, 42).order().to_vec();
        assert_eq!(a, batch_iterator(&ex, 10, 42).order().to_vec());
        assert_ne!(a, batch_iterator(&ex, 10, 43).order().to_vec());
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn images_are_unit_scaled() {
        let ex = fake(3);
        let b = Batch::from_examples(&ex, &[2]);
        assert!(b.images.iter().all(|&v| (v - 2.0 / 255.0).abs() < 1e-7));
        assert_eq!(b.lengths, vec![2]);
        assert_eq!(b.labels, vec![1]);
    }
}

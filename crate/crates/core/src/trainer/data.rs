use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::ChannelSignal;

pub const IMAGE_SIDE: usize = 8;
pub const INPUT_LENGTH: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const CLASSES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: ChannelSignal,
    pub label: usize,
}

/// Synthetic 8x8 images of four stroke orientations, flattened row-major to a
/// one-channel signal of length 64.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

fn stroke<R: Rng>(rng: &mut R, label: usize, noise: f64) -> Vec<f64> {
    let mut img = vec![0.0; INPUT_LENGTH];
    let amp = rng.random_range(0.6..1.4);
    let offset = rng.random_range(1..IMAGE_SIDE - 1);
    let start = rng.random_range(0..3);
    let len = rng.random_range(5..=IMAGE_SIDE - start);
    let shift = offset as isize - (IMAGE_SIDE / 2) as isize;
    for t in start..start + len {
        let (r, c) = match label {
            0 => (offset as isize, t as isize),
            1 => (t as isize, offset as isize),
            2 => (t as isize, t as isize + shift),
            _ => (t as isize, (IMAGE_SIDE - 1 - t) as isize + shift),
        };
        if (0..IMAGE_SIDE as isize).contains(&r) && (0..IMAGE_SIDE as isize).contains(&c) {
            img[r as usize * IMAGE_SIDE + c as usize] = amp;
        }
    }
    for v in &mut img {
        *v += rng.random_range(-noise..=noise);
    }
    img
}

impl Dataset {
    pub fn generate(train: usize, eval: usize, noise: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
        let mut make = |n: usize| -> Vec<Sample> {
            (0..n)
                .map(|i| {
                    let label = i % CLASSES;
                    Sample {
                        input: ChannelSignal::from_vec(stroke(&mut rng, label, noise)),
                        label,
                    }
                })
                .collect()
        };
        let train = make(train);
        let eval = make(eval);
        Self { train, eval }
    }
}

/// Draws `nodes * batch` training indices per iteration from one global
/// shuffled order; node `k` takes the `k`-th contiguous slice.
#[derive(Debug, Clone)]
pub struct ShardSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl ShardSampler {
    pub fn new(samples: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba7c_4e55);
        let mut order: Vec<usize> = (0..samples).collect();
        order.shuffle(&mut rng);
        Self { order, cursor: 0, rng }
    }

    /// `count` distinct indices; the tail of an epoch too short for a full
    /// draw is skipped.
    pub fn next_global(&mut self, count: usize) -> Vec<usize> {
        assert!(count <= self.order.len(), "draw larger than the dataset");
        if self.cursor + count > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + count].to_vec();
        self.cursor += count;
        out
    }

    pub fn next_shards(&mut self, nodes: usize, batch: usize) -> Vec<Vec<usize>> {
        self.next_global(nodes * batch)
            .chunks(batch)
            .map(<[usize]>::to_vec)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = Dataset::generate(64, 16, 0.3, 4);
        let b = Dataset::generate(64, 16, 0.3, 4);
        assert_eq!(a, b);
        for c in 0..CLASSES {
            assert_eq!(a.train.iter().filter(|s| s.label == c).count(), 16);
        }
        assert!(a.train.iter().all(|s| s.input.length() == INPUT_LENGTH));
    }

    #[test]
    fn shards_are_disjoint_within_an_iteration() {
        let mut s = ShardSampler::new(50, 1);
        for _ in 0..10 {
            let shards = s.next_shards(4, 5);
            let mut all: Vec<usize> = shards.concat();
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), 20);
        }
    }

    #[test]
    fn global_draw_matches_sharded_draw() {
        let mut a = ShardSampler::new(100, 9);
        let mut b = ShardSampler::new(100, 9);
        for _ in 0..30 {
            assert_eq!(a.next_global(8), b.next_shards(2, 4).concat());
        }
    }
}

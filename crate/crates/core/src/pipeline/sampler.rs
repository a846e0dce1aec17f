use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mix_seed;
use crate::datamodel::Label;
use crate::{Error, Result};

const EPOCH_STREAM: u64 = 0x5a4d_504c;

/// Balanced batch plan over a training set.
///
/// Each batch holds `batch_size / 2` live and `batch_size / 2` spoof indices.
/// Per epoch the larger class is shuffled and walked cyclically, so every one
/// of its samples appears at least once; the smaller class is drawn with
/// replacement. Classes of equal size are both walked.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    live: Vec<usize>,
    spoof: Vec<usize>,
    batch_size: usize,
    seed: u64,
}

pub fn make_balanced_sampler(
    labels: &[Label],
    batch_size: usize,
    seed: u64,
) -> Result<BalancedSampler> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::Config(format!(
            "batch_size {batch_size} must be even and positive for 1:1 batches"
        )));
    }
    let (live, spoof): (Vec<usize>, Vec<usize>) =
        (0..labels.len()).partition(|&i| labels[i].is_live());
    if live.is_empty() {
        return Err(Error::MissingClass("training set has no live samples".into()));
    }
    if spoof.is_empty() {
        return Err(Error::MissingClass("training set has no spoof samples".into()));
    }
    Ok(BalancedSampler {
        live,
        spoof,
        batch_size,
        seed,
    })
}

impl BalancedSampler {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// `⌈2 · max_class_count / batch_size⌉`.
    pub fn steps_per_epoch(&self) -> usize {
        (2 * self.live.len().max(self.spoof.len())).div_ceil(self.batch_size)
    }

    /// The batches of one epoch, a pure function of `(seed, epoch)`.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, EPOCH_STREAM, epoch));
        let half = self.batch_size / 2;
        let steps = self.steps_per_epoch();
        let walk_live = self.live.len() >= self.spoof.len();
        let walk_spoof = self.spoof.len() >= self.live.len();
        let mut live = self.live.clone();
        let mut spoof = self.spoof.clone();
        if walk_live {
            live.shuffle(&mut rng);
        }
        if walk_spoof {
            spoof.shuffle(&mut rng);
        }
        let draw = |pool: &[usize], walk: bool, step: usize, rng: &mut ChaCha8Rng| {
            (0..half)
                .map(|j| {
                    if walk {
                        pool[(step * half + j) % pool.len()]
                    } else {
                        pool[rng.random_range(0..pool.len())]
                    }
                })
                .collect::<Vec<_>>()
        };
        (0..steps)
            .map(|s| {
                let mut b = draw(&live, walk_live, s, &mut rng);
                b.extend(draw(&spoof, walk_spoof, s, &mut rng));
                b
            })
            .collect()
    }
}

//! C-way N_s-shot episodes and domain-alignment batches.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::hsi_data::{Patch, PoolKind, SampleSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeShape {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
}

impl EpisodeShape {
    pub fn samples(&self) -> usize {
        self.ways * (self.shots + self.queries)
    }
}

/// One few-shot task. Labels are episode-local class indices `0..ways`;
/// samples are grouped by episode class in both lists.
#[derive(Debug, Clone)]
pub struct Episode<'a> {
    pub support: Vec<(&'a Patch, usize)>,
    pub query: Vec<(&'a Patch, usize)>,
    /// Global class id to episode class.
    pub class_remap: BTreeMap<u16, usize>,
    pub domain: PoolKind,
    pub shape: EpisodeShape,
}

impl<'a> Episode<'a> {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|&(_, l)| l).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|&(_, l)| l).collect()
    }

    /// Support patches followed by query patches.
    pub fn patches(&self) -> Vec<&'a Patch> {
        self.support.iter().chain(&self.query).map(|&(p, _)| p).collect()
    }
}

pub fn sample_episode<'a, R: Rng + ?Sized>(
    pool: &'a SampleSet,
    shape: EpisodeShape,
    rng: &mut R,
) -> Result<Episode<'a>> {
    let EpisodeShape { ways, shots, queries } = shape;
    if ways == 0 || shots == 0 || queries == 0 {
        return Err(Error::Config(format!("episode needs C, N_s, N_q >= 1 (got {ways}, {shots}, {queries})")));
    }
    let classes = pool.class_ids();
    if classes.len() < ways {
        return Err(Error::Episode(format!(
            "{ways}-way episode requested but pool has only {} classes",
            classes.len()
        )));
    }
    let chosen = index::sample(rng, classes.len(), ways);
    let mut support = Vec::with_capacity(ways * shots);
    let mut query = Vec::with_capacity(ways * queries);
    let mut class_remap = BTreeMap::new();
    for (episode_class, ci) in chosen.into_iter().enumerate() {
        let class = classes[ci];
        let group = pool.group(class).unwrap_or_default();
        if group.len() < shots + queries {
            return Err(Error::Episode(format!(
                "class {class} has {} samples, episode needs {} ({shots} support + {queries} query)",
                group.len(),
                shots + queries
            )));
        }
        let picks = index::sample(rng, group.len(), shots + queries).into_vec();
        support.extend(picks[..shots].iter().map(|&i| (&group[i], episode_class)));
        query.extend(picks[shots..].iter().map(|&i| (&group[i], episode_class)));
        class_remap.insert(class, episode_class);
    }
    Ok(Episode { support, query, class_remap, domain: pool.kind(), shape })
}

#[derive(Debug, Clone)]
pub struct PatchBatch<'a> {
    pub patches: Vec<&'a Patch>,
    pub domain: PoolKind,
}

/// Uniform draw of `n` patches; falls back to sampling with replacement when
/// the pool holds fewer than `n` patches.
pub fn sample_alignment_batch<'a, R: Rng + ?Sized>(
    pool: &'a SampleSet,
    n: usize,
    rng: &mut R,
) -> Result<PatchBatch<'a>> {
    if n == 0 {
        return Err(Error::Config("alignment batch size must be >= 1".into()));
    }
    let all: Vec<&Patch> = pool.iter().collect();
    if all.is_empty() {
        return Err(Error::Episode("alignment pool is empty".into()));
    }
    let patches = if n <= all.len() {
        index::sample(rng, all.len(), n).into_iter().map(|i| all[i]).collect()
    } else {
        (0..n).map(|_| all[rng.gen_range(0..all.len())]).collect()
    };
    Ok(PatchBatch { patches, domain: pool.kind() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_pool(class_sizes: &[usize]) -> SampleSet {
        let mut set = SampleSet::new(PoolKind::Source);
        for (c, &n) in class_sizes.iter().enumerate() {
            for i in 0..n {
                set.push(Patch { values: vec![i as f32; 4], bands: 1, size: 2, label: c as u16 + 1, origin: (c, i) });
            }
        }
        set
    }

    #[test]
    fn episode_size_matches_formula() {
        let pool = toy_pool(&[25; 18]);
        let shape = EpisodeShape { ways: 16, shots: 1, queries: 19 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = sample_episode(&pool, shape, &mut rng).unwrap();
        assert_eq!(ep.support.len() + ep.query.len(), 320);
        assert_eq!(ep.patches().len(), shape.samples());
    }

    #[test]
    fn short_class_is_reported() {
        let pool = toy_pool(&[5, 5]);
        let shape = EpisodeShape { ways: 2, shots: 1, queries: 5 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_episode(&pool, shape, &mut rng).unwrap_err();
        assert!(err.to_string().contains("has 5 samples"), "{err}");
        let shape = EpisodeShape { ways: 3, shots: 1, queries: 1 };
        assert!(matches!(sample_episode(&pool, shape, &mut rng), Err(Error::Episode(_))));
    }

    #[test]
    fn alignment_batch_rules() {
        let pool = toy_pool(&[3, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(matches!(sample_alignment_batch(&pool, 0, &mut rng), Err(Error::Config(_))));
        assert_eq!(sample_alignment_batch(&pool, 1, &mut rng).unwrap().patches.len(), 1);
        assert_eq!(sample_alignment_batch(&pool, 12, &mut rng).unwrap().patches.len(), 12);
        let a = sample_alignment_batch(&pool, 4, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = sample_alignment_batch(&pool, 4, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let origins = |b: &PatchBatch| b.patches.iter().map(|p| p.origin).collect::<Vec<_>>();
        assert_eq!(origins(&a), origins(&b));
    }
}

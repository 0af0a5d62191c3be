//! Synthetic slide-bag generator.
//!
//! Each bag is a random 4-connected tissue region on the patch grid. Patch
//! features are a smooth spatial mixture of a few tissue-type prototypes plus
//! independent noise, so a patch is partly predictable from its neighbors.
//! Prototypes are shared by the whole dataset; each bag places its own
//! mixture centers.
//! Positive bags additionally carry one 4-connected blob of `⌈ρ·N⌉` positive
//! patches shifted along a class-specific direction and sharing a blob-level
//! latent vector.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::bag::PatchBag;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_bags: usize,
    /// Tissue is grown inside a `grid_side × grid_side` box.
    pub grid_side: usize,
    pub mean_nodes: usize,
    /// Node count is uniform in `mean_nodes ± node_jitter`.
    pub node_jitter: usize,
    pub dim: usize,
    /// Fraction of patches that are positive in a positive bag.
    pub positive_ratio: f64,
    pub num_classes: usize,
    /// Length of the class-signal shift added to positive patches.
    pub class_shift: f64,
    /// Std of independent per-patch noise.
    pub noise_scale: f64,
    /// Number of background tissue-type prototypes, shared across bags.
    pub tissue_types: usize,
    /// Std of each prototype coordinate.
    pub prototype_scale: f64,
    /// Kernel bandwidth (grid units) of the prototype mixture.
    pub field_length: f64,
    /// Std of the latent vector shared by a positive blob.
    pub blob_latent_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_bags: 200,
            grid_side: 32,
            mean_nodes: 300,
            node_jitter: 40,
            dim: 16,
            positive_ratio: 0.05,
            num_classes: 2,
            class_shift: 3.0,
            noise_scale: 1.0,
            tissue_types: 4,
            prototype_scale: 1.0,
            field_length: 4.0,
            blob_latent_scale: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_bags == 0 {
            return bad("n_bags must be positive".into());
        }
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.node_jitter >= self.mean_nodes {
            return bad("node_jitter must be smaller than mean_nodes".into());
        }
        if self.mean_nodes + self.node_jitter > self.grid_side * self.grid_side {
            return bad(format!(
                "{} nodes do not fit a {}x{} grid",
                self.mean_nodes + self.node_jitter,
                self.grid_side,
                self.grid_side
            ));
        }
        if !(0.0..=1.0).contains(&self.positive_ratio) {
            return bad(format!("positive_ratio {} outside [0, 1]", self.positive_ratio));
        }
        if self.tissue_types == 0 || self.field_length <= 0.0 {
            return bad("tissue_types and field_length must be positive".into());
        }
        for (name, v) in [
            ("class_shift", self.class_shift),
            ("noise_scale", self.noise_scale),
            ("prototype_scale", self.prototype_scale),
            ("blob_latent_scale", self.blob_latent_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Positive patch count for a bag of `n` patches.
    pub fn positives_for(&self, n: usize) -> Result<usize> {
        let k = (self.positive_ratio * n as f64).ceil() as usize;
        if k == 0 {
            return Err(Error::Argument(format!(
                "positive ratio {} leaves no positive patch in a bag of {n}",
                self.positive_ratio
            )));
        }
        Ok(k.min(n))
    }
}

const NEIGHBORS4: [[i32; 2]; 4] = [[1, 0], [-1, 0], [0, 1], [0, -1]];

/// Grows a random 4-connected region of `size` cells from `seed` inside `allowed`.
fn grow_region(
    seed: [i32; 2],
    size: usize,
    allowed: impl Fn([i32; 2]) -> bool,
    rng: &mut ChaCha8Rng,
) -> Vec<[i32; 2]> {
    let mut region = vec![seed];
    let mut taken: HashSet<[i32; 2]> = HashSet::from([seed]);
    let mut frontier: Vec<[i32; 2]> = Vec::new();
    let mut in_frontier: HashSet<[i32; 2]> = HashSet::new();
    let push_neighbors = |c: [i32; 2],
                          frontier: &mut Vec<[i32; 2]>,
                          in_frontier: &mut HashSet<[i32; 2]>,
                          taken: &HashSet<[i32; 2]>| {
        for [dx, dy] in NEIGHBORS4 {
            let n = [c[0] + dx, c[1] + dy];
            if allowed(n) && !taken.contains(&n) && in_frontier.insert(n) {
                frontier.push(n);
            }
        }
    };
    push_neighbors(seed, &mut frontier, &mut in_frontier, &taken);
    while region.len() < size && !frontier.is_empty() {
        let pick = rng.gen_range(0..frontier.len());
        let c = frontier.swap_remove(pick);
        in_frontier.remove(&c);
        taken.insert(c);
        region.push(c);
        push_neighbors(c, &mut frontier, &mut in_frontier, &taken);
    }
    region
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = normal_vec(rng, dim, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Deterministic synthetic dataset; bag labels are balanced across classes.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, seed: u64) -> Result<Vec<PatchBag>> {
    cfg.validate()?;
    let mut rng = stream(seed, Stream::Data);
    // class 0 is negative; classes 1.. each get their own signal direction
    let directions: Vec<Vec<f64>> = (0..cfg.num_classes).map(|_| unit_vec(&mut rng, cfg.dim)).collect();
    let prototypes: Vec<Vec<f64>> = (0..cfg.tissue_types)
        .map(|_| normal_vec(&mut rng, cfg.dim, cfg.prototype_scale))
        .collect();
    let mut labels: Vec<usize> = (0..cfg.n_bags).map(|i| i % cfg.num_classes).collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| generate_bag(cfg, format!("bag_{i:04}"), label, &directions[label], &prototypes, &mut rng))
        .collect()
}

fn generate_bag(
    cfg: &SynthConfig,
    bag_id: String,
    label: usize,
    direction: &[f64],
    prototypes: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<PatchBag> {
    let n = rng.gen_range(cfg.mean_nodes - cfg.node_jitter..=cfg.mean_nodes + cfg.node_jitter);
    let side = cfg.grid_side as i32;
    let center = [side / 2, side / 2];
    let mut coords = grow_region(center, n, |[x, y]| (0..side).contains(&x) && (0..side).contains(&y), rng);
    if coords.len() != n {
        return Err(Error::Invariant(format!("tissue growth stalled at {} of {n}", coords.len())));
    }
    coords.sort_unstable_by_key(|&[x, y]| (y, x));

    let centers: Vec<[i32; 2]> = (0..cfg.tissue_types).map(|_| coords[rng.gen_range(0..n)]).collect();
    let two_l2 = 2.0 * cfg.field_length * cfg.field_length;

    let mut positive = vec![false; n];
    let mut blob_latent = vec![0.0; cfg.dim];
    if label != 0 {
        let k = cfg.positives_for(n)?;
        let tissue: HashSet<[i32; 2]> = coords.iter().copied().collect();
        let seed_cell = coords[rng.gen_range(0..n)];
        let blob = grow_region(seed_cell, k, |c| tissue.contains(&c), rng);
        if blob.len() != k {
            return Err(Error::Invariant(format!("positive blob stalled at {} of {k}", blob.len())));
        }
        let blob: HashSet<[i32; 2]> = blob.into_iter().collect();
        for (p, c) in positive.iter_mut().zip(&coords) {
            *p = blob.contains(c);
        }
        blob_latent = normal_vec(rng, cfg.dim, cfg.blob_latent_scale);
    }

    let mut features = Vec::with_capacity(n * cfg.dim);
    for (i, &[x, y]) in coords.iter().enumerate() {
        let weights: Vec<f64> = centers
            .iter()
            .map(|&[cx, cy]| {
                let d2 = f64::from((x - cx).pow(2) + (y - cy).pow(2));
                (-d2 / two_l2).exp()
            })
            .collect();
        let total: f64 = weights.iter().sum::<f64>().max(1e-300);
        let noise = normal_vec(rng, cfg.dim, cfg.noise_scale);
        for j in 0..cfg.dim {
            let mut v: f64 = weights
                .iter()
                .zip(prototypes)
                .map(|(w, p)| w * p[j])
                .sum::<f64>()
                / total;
            v += noise[j];
            if positive[i] {
                v += cfg.class_shift * direction[j] + blob_latent[j];
            }
            features.push(v as f32);
        }
    }

    let bag = PatchBag {
        bag_id,
        dim: cfg.dim,
        features,
        coords,
        label,
        instance_labels: Some(positive),
    };
    bag.validate()?;
    Ok(bag)
}

#[cfg(test)]
mod tests {
    use std::collections::VecDeque;

    use super::*;
    use crate::graph::bag::encode_bag;

    fn four_connected(cells: &[[i32; 2]]) -> bool {
        let set: HashSet<[i32; 2]> = cells.iter().copied().collect();
        let mut seen = HashSet::from([cells[0]]);
        let mut queue = VecDeque::from([cells[0]]);
        while let Some(c) = queue.pop_front() {
            for [dx, dy] in NEIGHBORS4 {
                let n = [c[0] + dx, c[1] + dy];
                if set.contains(&n) && seen.insert(n) {
                    queue.push_back(n);
                }
            }
        }
        seen.len() == set.len()
    }

    fn small() -> SynthConfig {
        SynthConfig {
            n_bags: 6,
            grid_side: 24,
            mean_nodes: 400,
            node_jitter: 1,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn negative_and_positive_bags_follow_contract() {
        let cfg = SynthConfig { node_jitter: 0, mean_nodes: 400, ..small() };
        let bags = generate_synthetic_dataset(&cfg, 11).unwrap();
        for bag in &bags {
            assert_eq!(bag.len(), 400);
            assert!(four_connected(&bag.coords));
            let labels = bag.instance_labels.as_ref().unwrap();
            let pos: Vec<[i32; 2]> = bag
                .coords
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l)
                .map(|(c, _)| *c)
                .collect();
            if bag.label == 0 {
                assert!(pos.is_empty());
            } else {
                assert_eq!(pos.len(), 20);
                assert!(four_connected(&pos));
            }
        }
        assert!(bags.iter().any(|b| b.label == 0) && bags.iter().any(|b| b.label == 1));
    }

    #[test]
    fn positive_fraction_is_exact_ceiling() {
        let cfg = small();
        for bag in generate_synthetic_dataset(&cfg, 5).unwrap() {
            if bag.label != 0 {
                let count = bag.instance_labels.as_ref().unwrap().iter().filter(|&&l| l).count();
                assert_eq!(count, (0.05 * bag.len() as f64).ceil() as usize);
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let cfg = small();
        let a = generate_synthetic_dataset(&cfg, 3).unwrap();
        let b = generate_synthetic_dataset(&cfg, 3).unwrap();
        let c = generate_synthetic_dataset(&cfg, 4).unwrap();
        let bytes = |v: &[PatchBag]| v.iter().flat_map(|b| encode_bag(b).unwrap()).collect::<Vec<u8>>();
        assert_eq!(bytes(&a), bytes(&b));
        assert_ne!(bytes(&a), bytes(&c));
    }

    #[test]
    fn zero_ratio_cannot_make_positive_bags() {
        let cfg = SynthConfig { positive_ratio: 0.0, ..small() };
        assert!(matches!(generate_synthetic_dataset(&cfg, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn multiclass_labels_are_balanced() {
        let cfg = SynthConfig { n_bags: 9, num_classes: 3, ..small() };
        let bags = generate_synthetic_dataset(&cfg, 2).unwrap();
        for c in 0..3 {
            assert_eq!(bags.iter().filter(|b| b.label == c).count(), 3);
        }
    }
}

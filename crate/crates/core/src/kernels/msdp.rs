//! Multi-scale depth prior: per pyramid level, `M` blocks of
//! Conv3×3 → norm → ReLU starting from the level feature, then a 1×1 head
//! that regresses a single-channel depth map.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::impl_module;
use crate::layers::{Conv, ConvBlock, ConvBlockCache};
use crate::tensor::{StatsMode, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct MsdpLevel {
    pub blocks: Vec<ConvBlock>,
    pub head: Conv,
}

impl_module!(MsdpLevel { blocks, head });

#[derive(Clone, Debug)]
pub struct MsdpLevelCache {
    blocks: Vec<ConvBlockCache>,
    feature: Tensor,
}

impl MsdpLevelCache {
    pub fn block_caches(&self) -> &[ConvBlockCache] {
        &self.blocks
    }
}

impl MsdpLevel {
    pub fn new<R: Rng + ?Sized>(channels: usize, depth_convs: usize, rng: &mut R) -> Result<Self> {
        if depth_convs < 1 {
            return Err(Error::invalid(
                "MSDP needs at least one depth-specific convolution (M >= 1)",
            ));
        }
        Ok(Self {
            blocks: (0..depth_convs)
                .map(|_| ConvBlock::new(channels, channels, 3, 1, rng))
                .collect(),
            head: Conv::new(channels, 1, 1, 1, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.head.weight.shape()[1]
    }

    /// Returns `(D^M, depth map, cache)`.
    pub fn forward(
        &self,
        input: &Tensor,
        mode: StatsMode,
    ) -> Result<(Tensor, Tensor, MsdpLevelCache)> {
        if self.blocks.is_empty() {
            return Err(Error::invalid(
                "MSDP needs at least one depth-specific convolution (M >= 1)",
            ));
        }
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(&x, mode)?;
            caches.push(cache);
            x = y;
        }
        let depth = self.head.forward(&x)?;
        Ok((
            x.clone(),
            depth,
            MsdpLevelCache {
                blocks: caches,
                feature: x,
            },
        ))
    }

    /// Backpropagates gradients arriving at `D^M` (from kernel generation) and
    /// at the depth map (from the depth loss) down to the level input.
    pub fn backward(
        &self,
        grad_feature: Option<&Tensor>,
        grad_depth: Option<&Tensor>,
        cache: &MsdpLevelCache,
        grads: &mut MsdpLevel,
    ) -> Result<Tensor> {
        let mut g = match grad_feature {
            Some(gf) => gf.clone(),
            None => Tensor::zeros(cache.feature.shape()),
        };
        if let Some(gd) = grad_depth {
            g.add_assign(&self.head.backward(gd, &cache.feature, &mut grads.head)?)?;
        }
        for (block, (bc, bg)) in self
            .blocks
            .iter()
            .zip(cache.blocks.iter().zip(grads.blocks.iter_mut()))
            .rev()
        {
            g = block.backward(&g, bc, bg)?;
        }
        Ok(g)
    }
}

/// Per-level MSDP parameters; every level has the same `M`.
#[derive(Clone, Debug, PartialEq)]
pub struct MsdpParams {
    pub levels: BTreeMap<u32, MsdpLevel>,
}

impl_module!(MsdpParams { levels });

impl MsdpParams {
    pub fn new<R: Rng + ?Sized>(
        levels: impl IntoIterator<Item = u32>,
        channels: usize,
        depth_convs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for n in levels {
            map.insert(n, MsdpLevel::new(channels, depth_convs, rng)?);
        }
        Ok(Self { levels: map })
    }

    pub fn depth_convs(&self) -> usize {
        self.levels.values().next().map_or(0, |l| l.blocks.len())
    }
}

#[derive(Clone, Debug)]
pub struct MsdpOutput {
    pub depth_features: BTreeMap<u32, Tensor>,
    pub depth_maps: BTreeMap<u32, Tensor>,
    pub caches: BTreeMap<u32, MsdpLevelCache>,
}

pub fn msdp_forward(
    pyramid: &BTreeMap<u32, Tensor>,
    params: &MsdpParams,
    mode: StatsMode,
) -> Result<MsdpOutput> {
    let m = params.depth_convs();
    if m < 1 {
        return Err(Error::invalid(
            "MSDP needs at least one depth-specific convolution (M >= 1)",
        ));
    }
    if params.levels.values().any(|l| l.blocks.len() != m) {
        return Err(Error::invalid("all MSDP levels must share the same M"));
    }
    let mut out = MsdpOutput {
        depth_features: BTreeMap::new(),
        depth_maps: BTreeMap::new(),
        caches: BTreeMap::new(),
    };
    for (&n, feature) in pyramid {
        let level = params
            .levels
            .get(&n)
            .ok_or_else(|| Error::shape(format!("no MSDP parameters for pyramid level {n}")))?;
        let (c, _, _) = feature.dims3()?;
        if c != level.channels() {
            return Err(Error::shape(format!(
                "level {n}: feature has {c} channels, MSDP expects {}",
                level.channels()
            )));
        }
        let (d, map, cache) = level.forward(feature, mode)?;
        out.depth_features.insert(n, d);
        out.depth_maps.insert(n, map);
        out.caches.insert(n, cache);
    }
    Ok(out)
}

/// Gradient with respect to each pyramid level, plus parameter gradients.
pub fn msdp_backward(
    output: &MsdpOutput,
    params: &MsdpParams,
    grad_features: &BTreeMap<u32, Tensor>,
    grad_depth_maps: &BTreeMap<u32, Tensor>,
) -> Result<(BTreeMap<u32, Tensor>, MsdpParams)> {
    use crate::params::Module;
    let mut grads = params.zeros_like();
    let mut grad_inputs = BTreeMap::new();
    for (&n, cache) in &output.caches {
        let level = &params.levels[&n];
        let g = level.backward(
            grad_features.get(&n),
            grad_depth_maps.get(&n),
            cache,
            grads.levels.get_mut(&n).expect("same structure"),
        )?;
        grad_inputs.insert(n, g);
    }
    Ok((grad_inputs, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Module;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_input_zero_bias_gives_zero_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = MsdpParams::new([3, 4], 4, 3, &mut rng).unwrap();
        let pyramid: BTreeMap<u32, Tensor> = [
            (3, Tensor::zeros(&[4, 16, 16])),
            (4, Tensor::zeros(&[4, 8, 8])),
        ]
        .into();
        let out = msdp_forward(&pyramid, &params, StatsMode::Batch).unwrap();
        for map in out.depth_maps.values() {
            assert!(map.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn shapes_preserved_for_every_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for m in 1..=4 {
            let params = MsdpParams::new([3], 4, m, &mut rng).unwrap();
            let pyramid: BTreeMap<u32, Tensor> =
                [(3, Tensor::randn(&[4, 32, 32], 1.0, &mut rng))].into();
            let out = msdp_forward(&pyramid, &params, StatsMode::Batch).unwrap();
            assert_eq!(out.depth_features[&3].shape(), &[4, 32, 32]);
            assert_eq!(out.depth_maps[&3].shape(), &[1, 32, 32]);
        }
    }

    #[test]
    fn m_zero_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(MsdpParams::new([3], 4, 0, &mut rng).is_err());
    }

    #[test]
    fn parameter_names_are_level_prefixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = MsdpParams::new([3], 2, 1, &mut rng).unwrap();
        let names: Vec<_> = params.param_list().into_iter().map(|p| p.name).collect();
        assert!(names.contains(&"levels.p3.blocks.0.conv.weight".to_string()));
        assert!(names.contains(&"levels.p3.head.bias".to_string()));
    }
}

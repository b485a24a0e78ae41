//! Depth-conditioned kernels.
//!
//! At every position the depth feature vector `D[i,j]` goes through a
//! bottleneck `W2 · σ(W1 · D[i,j])` (σ = normalization over all positions of
//! the map, then ReLU) and is reshaped into `G` kernels of size `K×K`.
//! Modulation then applies, for each channel, the kernel of that channel's
//! group as a position-specific correlation with zero padding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::impl_module;
use crate::layers::Norm;
use crate::tensor::{conv2d, conv2d_backward, NormCache, StatsMode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DckConfig {
    pub kernel_size: usize,
    pub groups: usize,
    pub reduction: usize,
    pub channels: usize,
}

impl Default for DckConfig {
    fn default() -> Self {
        Self {
            kernel_size: 7,
            groups: 16,
            reduction: 16,
            channels: 256,
        }
    }
}

impl DckConfig {
    pub fn validate(&self) -> Result<()> {
        let DckConfig {
            kernel_size: k,
            groups: g,
            reduction: r,
            channels: c,
        } = *self;
        if k % 2 == 0 {
            return Err(Error::invalid(format!("DCK kernel size {k} must be odd")));
        }
        if g < 1 || g > c || c % g != 0 {
            return Err(Error::invalid(format!(
                "DCK groups {g} must divide channel count {c}"
            )));
        }
        if r < 1 || c / r < 1 {
            return Err(Error::invalid(format!(
                "DCK reduction {r} leaves no bottleneck channels for C={c}"
            )));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn kernel_rows(&self) -> usize {
        self.kernel_size * self.kernel_size * self.groups
    }

    /// Zero-based group index of channel `c`; equal to `⌈(c+1)·G/C⌉ − 1`.
    pub fn group_of(&self, c: usize) -> usize {
        c / (self.channels / self.groups)
    }
}

/// Bottleneck weights of the kernel generator.
#[derive(Clone, Debug, PartialEq)]
pub struct DckParams {
    /// `[C/r, C]`
    pub w1: Tensor,
    /// `[K²·G, C/r]`
    pub w2: Tensor,
    pub norm: Norm,
}

impl_module!(DckParams { w1, w2, norm });

impl DckParams {
    pub fn new<R: Rng + ?Sized>(config: &DckConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (c, h, rows) = (config.channels, config.hidden(), config.kernel_rows());
        Ok(Self {
            w1: Tensor::randn(&[h, c], (2.0 / c as f64).sqrt(), rng),
            // small initial kernels: modulation starts near zero
            w2: Tensor::randn(&[rows, h], 0.1 / (h as f64).sqrt(), rng),
            norm: Norm::new(h),
        })
    }

    fn check(&self, config: &DckConfig) -> Result<()> {
        config.validate()?;
        let (c, h, rows) = (config.channels, config.hidden(), config.kernel_rows());
        if self.w1.shape() != [h, c] {
            return Err(Error::shape(format!(
                "W1: expected [{h}, {c}], got {:?}",
                self.w1.shape()
            )));
        }
        if self.w2.shape().len() != 2 || self.w2.shape()[0] != rows {
            return Err(Error::shape(format!(
                "W2 rows: expected K²·G = {rows}, got {:?}",
                self.w2.shape()
            )));
        }
        if self.w2.shape()[1] != h {
            return Err(Error::shape(format!(
                "W2 columns: expected C/r = {h}, got {}",
                self.w2.shape()[1]
            )));
        }
        Ok(())
    }
}

/// Per-position kernels laid out as `[H, W, K, K, G]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelField {
    pub height: usize,
    pub width: usize,
    pub kernel_size: usize,
    pub groups: usize,
    pub data: Vec<f64>,
}

impl KernelField {
    pub fn zeros(height: usize, width: usize, kernel_size: usize, groups: usize) -> Self {
        Self {
            height,
            width,
            kernel_size,
            groups,
            data: vec![0.0; height * width * kernel_size * kernel_size * groups],
        }
    }

    /// Kernel that is 1 at its center and 0 elsewhere, at every position.
    pub fn delta(height: usize, width: usize, kernel_size: usize, groups: usize) -> Self {
        let mut f = Self::zeros(height, width, kernel_size, groups);
        let h = kernel_size / 2;
        for i in 0..height {
            for j in 0..width {
                for g in 0..groups {
                    let idx = f.index(i, j, h, h, g);
                    f.data[idx] = 1.0;
                }
            }
        }
        f
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, u: usize, v: usize, g: usize) -> usize {
        (((i * self.width + j) * self.kernel_size + u) * self.kernel_size + v) * self.groups + g
    }

    pub fn get(&self, i: usize, j: usize, u: usize, v: usize, g: usize) -> f64 {
        self.data[self.index(i, j, u, v, g)]
    }

    /// The `(K·K·G)` block of one position.
    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        let n = self.kernel_size * self.kernel_size * self.groups;
        let start = (i * self.width + j) * n;
        &self.data[start..start + n]
    }

    fn from_rows(rows: &Tensor, kernel_size: usize, groups: usize) -> Result<Self> {
        let (r, h, w) = rows.dims3()?;
        let mut f = Self::zeros(h, w, kernel_size, groups);
        debug_assert_eq!(r, kernel_size * kernel_size * groups);
        let plane = h * w;
        for (row, chunk) in rows.data().chunks_exact(plane).enumerate() {
            for (p, &v) in chunk.iter().enumerate() {
                f.data[p * r + row] = v;
            }
        }
        Ok(f)
    }

    fn to_rows(&self) -> Result<Tensor> {
        let r = self.kernel_size * self.kernel_size * self.groups;
        let plane = self.height * self.width;
        let mut data = vec![0.0; r * plane];
        for p in 0..plane {
            for row in 0..r {
                data[row * plane + p] = self.data[p * r + row];
            }
        }
        Tensor::from_vec(&[r, self.height, self.width], data)
    }
}

#[derive(Clone, Debug)]
pub struct DckGenCache {
    depth_feature: Tensor,
    hidden_pre: Tensor,
    hidden: Tensor,
    norm: NormCache,
}

impl DckGenCache {
    pub fn norm(&self) -> &NormCache {
        &self.norm
    }
}

fn as_pointwise(w: &Tensor) -> Result<Tensor> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    w.clone().reshape(&[o, i, 1, 1])
}

pub fn dck_generate(
    depth_feature: &Tensor,
    params: &DckParams,
    config: &DckConfig,
    mode: StatsMode,
) -> Result<(KernelField, DckGenCache)> {
    params.check(config)?;
    let (c, _, _) = depth_feature.dims3()?;
    if c != config.channels {
        return Err(Error::shape(format!(
            "depth feature has {c} channels, DCK configured for {}",
            config.channels
        )));
    }
    let hidden_pre = conv2d(
        depth_feature,
        &as_pointwise(&params.w1)?,
        &Tensor::zeros(&[config.hidden()]),
        1,
        0,
    )?;
    let (hidden, norm) = params.norm.forward(&hidden_pre, mode)?;
    let rows = conv2d(
        &hidden,
        &as_pointwise(&params.w2)?,
        &Tensor::zeros(&[config.kernel_rows()]),
        1,
        0,
    )?;
    let field = KernelField::from_rows(&rows, config.kernel_size, config.groups)?;
    Ok((
        field,
        DckGenCache {
            depth_feature: depth_feature.clone(),
            hidden_pre,
            hidden,
            norm,
        },
    ))
}

fn check_field(
    features: &Tensor,
    kernels: &KernelField,
    config: &DckConfig,
) -> Result<(usize, usize, usize)> {
    config.validate()?;
    let (c, h, w) = features.dims3()?;
    if c != config.channels {
        return Err(Error::shape(format!(
            "features have {c} channels, DCK configured for {}",
            config.channels
        )));
    }
    if (kernels.height, kernels.width) != (h, w) {
        return Err(Error::shape(format!(
            "kernel field is {}x{}, features are {h}x{w}",
            kernels.height, kernels.width
        )));
    }
    if kernels.kernel_size != config.kernel_size || kernels.groups != config.groups {
        return Err(Error::shape(format!(
            "kernel field K={} G={}, config K={} G={}",
            kernels.kernel_size, kernels.groups, config.kernel_size, config.groups
        )));
    }
    Ok((c, h, w))
}

/// `out[c,i,j] = Σ_{u,v} K[i,j,u+⌊K/2⌋,v+⌊K/2⌋,group(c)] · f[c,i+u,j+v]`, zero outside.
pub fn dck_modulate(
    features: &Tensor,
    kernels: &KernelField,
    config: &DckConfig,
) -> Result<Tensor> {
    let (c, h, w) = check_field(features, kernels, config)?;
    let k = config.kernel_size;
    let half = (k / 2) as isize;
    let f = features.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let g = config.group_of(ch);
        let plane = &f[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for u in 0..k {
                    let y = i as isize + u as isize - half;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for v in 0..k {
                        let x = j as isize + v as isize - half;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        acc += kernels.get(i, j, u, v, g) * plane[y as usize * w + x as usize];
                    }
                }
                out[(ch * h + i) * w + j] = acc;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Gradients of [`dck_modulate`] with the kernel field treated as an input.
pub fn dck_modulate_backward(
    grad_out: &Tensor,
    features: &Tensor,
    kernels: &KernelField,
    config: &DckConfig,
) -> Result<(Tensor, KernelField)> {
    let (c, h, w) = check_field(features, kernels, config)?;
    grad_out.same_shape(features, "dck_modulate_backward grad_out")?;
    let k = config.kernel_size;
    let half = (k / 2) as isize;
    let f = features.data();
    let go = grad_out.data();
    let mut gf = vec![0.0; c * h * w];
    let mut gk = KernelField::zeros(h, w, k, config.groups);
    for ch in 0..c {
        let g = config.group_of(ch);
        let base = ch * h * w;
        for i in 0..h {
            for j in 0..w {
                let gij = go[base + i * w + j];
                for u in 0..k {
                    let y = i as isize + u as isize - half;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for v in 0..k {
                        let x = j as isize + v as isize - half;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let src = base + y as usize * w + x as usize;
                        let kidx = kernels.index(i, j, u, v, g);
                        gf[src] += gij * kernels.data[kidx];
                        gk.data[kidx] += gij * f[src];
                    }
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[c, h, w], gf)?, gk))
}

/// Backpropagates a kernel-field gradient through `W2`, σ and `W1`.
pub fn dck_generate_backward(
    grad_kernels: &KernelField,
    cache: &DckGenCache,
    params: &DckParams,
    config: &DckConfig,
    grads: &mut DckParams,
) -> Result<Tensor> {
    params.check(config)?;
    let g_rows = grad_kernels.to_rows()?;
    let g2 = conv2d_backward(&g_rows, &cache.hidden, &as_pointwise(&params.w2)?, 1, 0)?;
    grads
        .w2
        .add_assign(&g2.weight.reshape(params.w2.shape())?)?;
    let g_pre = params
        .norm
        .backward(&g2.input, &cache.norm, &mut grads.norm)?;
    debug_assert_eq!(g_pre.shape(), cache.hidden_pre.shape());
    let g1 = conv2d_backward(
        &g_pre,
        &cache.depth_feature,
        &as_pointwise(&params.w1)?,
        1,
        0,
    )?;
    grads
        .w1
        .add_assign(&g1.weight.reshape(params.w1.shape())?)?;
    Ok(g1.input)
}

#[derive(Clone, Debug)]
pub struct DckGrads {
    pub features: Tensor,
    pub depth_feature: Tensor,
    pub params: DckParams,
}

/// Joint backward through modulation and kernel generation.
pub fn dck_backward(
    grad_out: &Tensor,
    features: &Tensor,
    kernels: &KernelField,
    cache: &DckGenCache,
    params: &DckParams,
    config: &DckConfig,
) -> Result<DckGrads> {
    use crate::params::Module;
    let (g_features, g_kernels) = dck_modulate_backward(grad_out, features, kernels, config)?;
    let mut g_params = params.zeros_like();
    let g_depth = dck_generate_backward(&g_kernels, cache, params, config, &mut g_params)?;
    Ok(DckGrads {
        features: g_features,
        depth_feature: g_depth,
        params: g_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RunningStats;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(c: usize, g: usize, r: usize, k: usize) -> DckConfig {
        DckConfig {
            kernel_size: k,
            groups: g,
            reduction: r,
            channels: c,
        }
    }

    #[test]
    fn config_validation() {
        assert!(DckConfig::default().validate().is_ok());
        assert!(cfg(16, 4, 4, 4).validate().is_err());
        assert!(cfg(16, 3, 4, 3).validate().is_err());
        assert!(cfg(4, 1, 8, 3).validate().is_err());
    }

    #[test]
    fn group_assignment_matches_ceiling_rule() {
        let c = cfg(12, 4, 1, 3);
        for ch in 0..12 {
            let one_based = ((ch + 1) as f64 * 4.0 / 12.0).ceil() as usize;
            assert_eq!(c.group_of(ch) + 1, one_based);
        }
    }

    #[test]
    fn zero_w2_gives_zero_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = cfg(4, 2, 2, 3);
        let mut p = DckParams::new(&c, &mut rng).unwrap();
        p.w2 = Tensor::zeros(p.w2.shape());
        let d = Tensor::randn(&[4, 5, 5], 1.0, &mut rng);
        let (k, _) = dck_generate(&d, &p, &c, StatsMode::Batch).unwrap();
        assert!(k.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_feature_gives_identical_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cfg(4, 2, 2, 3);
        let p = DckParams::new(&c, &mut rng).unwrap();
        let mut d = Tensor::zeros(&[4, 3, 4]);
        for ch in 0..4 {
            for v in &mut d.data_mut()[ch * 12..(ch + 1) * 12] {
                *v = ch as f64 - 1.3;
            }
        }
        // running mode so normalization does not erase the constant field
        let mut p = p;
        p.norm.stats = RunningStats {
            mean: vec![0.1, -0.2],
            var: vec![0.5, 2.0],
        };
        let (k, _) = dck_generate(&d, &p, &c, StatsMode::Running).unwrap();
        let first = k.at(0, 0).to_vec();
        assert!(first.iter().any(|&v| v != 0.0));
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(k.at(i, j), &first[..]);
            }
        }
    }

    #[test]
    fn hand_computed_kernel_on_single_position() {
        // C=4, r=2, K=3, G=1
        let c = cfg(4, 1, 2, 3);
        let w1 = Tensor::from_vec(&[2, 4], vec![1.0, 0.0, -1.0, 2.0, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let w2 =
            Tensor::from_vec(&[9, 2], (0..18).map(|i| i as f64 * 0.25 - 2.0).collect()).unwrap();
        let mut norm = Norm::new(2);
        norm.gamma = Tensor::from_vec(&[2], vec![2.0, 1.0]).unwrap();
        norm.beta = Tensor::from_vec(&[2], vec![0.5, -3.0]).unwrap();
        norm.stats = RunningStats {
            mean: vec![1.0, 0.0],
            var: vec![4.0, 1.0],
        };
        let p = DckParams {
            w1,
            w2: w2.clone(),
            norm,
        };
        let d = Tensor::from_vec(&[4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (k, _) = dck_generate(&d, &p, &c, StatsMode::Running).unwrap();
        // W1·D = [1 - 3 + 8, 5] = [6, 5]
        let eps = crate::tensor::BN_EPS;
        let h0 = (2.0 * (6.0 - 1.0) / (4.0f64 + eps).sqrt() + 0.5).max(0.0);
        let h1 = (1.0 * (5.0 - 0.0) / (1.0f64 + eps).sqrt() - 3.0).max(0.0);
        for row in 0..9 {
            let want = w2.data()[row * 2] * h0 + w2.data()[row * 2 + 1] * h1;
            let (u, v) = (row / 3, row % 3);
            assert!((k.get(0, 0, u, v, 0) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn w2_row_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cfg(4, 1, 2, 3);
        let mut p = DckParams::new(&c, &mut rng).unwrap();
        p.w2 = Tensor::zeros(&[8, 2]);
        let err = dck_generate(&Tensor::zeros(&[4, 2, 2]), &p, &c, StatsMode::Batch).unwrap_err();
        assert!(err.to_string().contains("K²·G"), "{err}");
    }

    #[test]
    fn modulate_examples() {
        let c = cfg(1, 1, 1, 3);
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let mut k = KernelField::zeros(3, 3, 3, 1);
        k.data.fill(1.0);
        let y = dck_modulate(&x, &k, &c).unwrap();
        assert_eq!(y.data()[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(y.data()[corner], 4.0);
        }
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn delta_and_zero_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = cfg(4, 2, 1, 5);
        let x = Tensor::randn(&[4, 6, 7], 1.0, &mut rng);
        assert_eq!(
            dck_modulate(&x, &KernelField::delta(6, 7, 5, 2), &c).unwrap(),
            x
        );
        let z = dck_modulate(&x, &KernelField::zeros(6, 7, 5, 2), &c).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let c = cfg(2, 1, 1, 3);
        let x = Tensor::zeros(&[2, 4, 4]);
        assert!(matches!(
            dck_modulate(&x, &KernelField::zeros(4, 5, 3, 1), &c),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_grad_out_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = cfg(2, 1, 1, 3);
        let p = DckParams::new(&c, &mut rng).unwrap();
        let d = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
        let x = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
        let (k, cache) = dck_generate(&d, &p, &c, StatsMode::Batch).unwrap();
        let g = dck_backward(&Tensor::zeros(&[2, 4, 4]), &x, &k, &cache, &p, &c).unwrap();
        assert_eq!(g.features.max_abs(), 0.0);
        assert_eq!(g.depth_feature.max_abs(), 0.0);
        assert_eq!(g.params.w1.max_abs(), 0.0);
        assert_eq!(g.params.w2.max_abs(), 0.0);
        assert_eq!(g.params.norm.gamma.max_abs(), 0.0);
    }
}

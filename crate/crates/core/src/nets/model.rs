//! Generator with partitioned multiplicative latent injections, and a dense
//! discriminator with adversarial, feature and masking heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::autodiff::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{dim_err, Error, Result};
use crate::image::{Image, ImageShape};
use crate::tensor::Matrix;

/// Network sizes. Versioned so checkpoints record what they were built with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub version: u32,
    pub image: ImageShape,
    pub latent_dim: usize,
    /// Number of injections; `latent_dim` must be divisible by it.
    pub stages: usize,
    pub gen_width: usize,
    pub disc_widths: Vec<usize>,
    pub feature_dim: usize,
    pub leaky_slope: f64,
    pub init_seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            version: 1,
            image: ImageShape::new(1, 32, 32),
            latent_dim: 8,
            stages: 4,
            gen_width: 64,
            disc_widths: vec![128, 64],
            feature_dim: 8,
            leaky_slope: 0.2,
            init_seed: 0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.stages == 0 || self.latent_dim % self.stages != 0 {
            return Err(Error::Config(format!(
                "latent dim {} must be a positive multiple of stages {}",
                self.latent_dim, self.stages
            )));
        }
        if self.image.is_empty() || self.gen_width == 0 || self.feature_dim == 0 {
            return Err(Error::Config("image, generator width and feature dim must be positive".into()));
        }
        if self.disc_widths.is_empty() || self.disc_widths.contains(&0) {
            return Err(Error::Config("discriminator needs at least one nonzero layer".into()));
        }
        Ok(())
    }

    pub fn partition_size(&self) -> usize {
        self.latent_dim / self.stages
    }

    /// Half-open latent index range consumed by each injection.
    pub fn partitions(&self) -> Vec<(usize, usize)> {
        let p = self.partition_size();
        (0..self.stages).map(|k| (k * p, (k + 1) * p)).collect()
    }

    pub fn penultimate_width(&self) -> usize {
        *self.disc_widths.last().expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageIds {
    a_w: ParamId,
    a_b: ParamId,
    inj: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Ids {
    gen_const: ParamId,
    stages: Vec<StageIds>,
    out_w: ParamId,
    out_b: ParamId,
    body: Vec<(ParamId, ParamId)>,
    adv_w: ParamId,
    adv_b: ParamId,
    feat_w: ParamId,
    mask_w: ParamId,
    mask_b: ParamId,
}

/// Generator and discriminator parameters in one store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanModel {
    pub arch: ArchConfig,
    pub params: ParamStore,
    ids: Ids,
}

/// Outputs of one discriminator pass.
#[derive(Debug, Clone, Copy)]
pub struct DiscNodes {
    pub adv: NodeId,
    pub v: NodeId,
    pub phi: NodeId,
}

/// Whether a forward pass produces gradients for the network's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Frozen,
}

/// Anything that maps latent codes to images.
pub trait ImageGenerator {
    fn latent_dim(&self) -> usize;
    fn image_shape(&self) -> ImageShape;
    /// One flattened image per row of `h`.
    fn generate_batch(&self, h: &Matrix) -> Result<Matrix>;

    fn generate(&self, h: &[f64]) -> Result<Image> {
        let m = Matrix::from_vec(1, h.len(), h.to_vec())?;
        let out = self.generate_batch(&m)?;
        Image::new(self.image_shape(), out.into_vec())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let n = Normal::new(0.0, std).expect("std");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect()).expect("shape")
}

impl GanModel {
    pub fn new(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(arch.init_seed);
        let mut p = ParamStore::new();
        let w = arch.gen_width;
        let part = arch.partition_size();
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();

        let gen_const = p.add("gen.const", gaussian(&mut rng, 1, w, 1.0))?;
        let mut stages = Vec::with_capacity(arch.stages);
        for k in 0..arch.stages {
            stages.push(StageIds {
                a_w: p.add(format!("gen.stage{k}.a.w"), gaussian(&mut rng, w, w, he(w)))?,
                a_b: p.add(format!("gen.stage{k}.a.b"), Matrix::zeros(1, w))?,
                inj: p.add(format!("gen.stage{k}.inj.w"), gaussian(&mut rng, part, w, 1.0 / (part as f64).sqrt()))?,
            });
        }
        let pix = arch.image.len();
        let out_w = p.add("gen.out.w", gaussian(&mut rng, w, pix, (1.0 / w as f64).sqrt()))?;
        let out_b = p.add("gen.out.b", Matrix::zeros(1, pix))?;

        let mut body = Vec::new();
        let mut fan_in = pix;
        for (l, &width) in arch.disc_widths.iter().enumerate() {
            body.push((
                p.add(format!("disc.body{l}.w"), gaussian(&mut rng, fan_in, width, he(fan_in)))?,
                p.add(format!("disc.body{l}.b"), Matrix::zeros(1, width))?,
            ));
            fan_in = width;
        }
        let v = fan_in;
        let adv_w = p.add("disc.adv.w", gaussian(&mut rng, v, 1, (1.0 / v as f64).sqrt()))?;
        let adv_b = p.add("disc.adv.b", Matrix::zeros(1, 1))?;
        let feat_w = p.add("disc.feat.w", gaussian(&mut rng, v, arch.feature_dim, (1.0 / v as f64).sqrt()))?;
        let d = arch.latent_dim;
        let mask_w = p.add("disc.mask.w", gaussian(&mut rng, 2 * arch.feature_dim, d, 0.1))?;
        let mask_b = p.add("disc.mask.b", Matrix::zeros(1, d))?;
        Ok(Self {
            arch,
            params: p,
            ids: Ids {
                gen_const,
                stages,
                out_w,
                out_b,
                body,
                adv_w,
                adv_b,
                feat_w,
                mask_w,
                mask_b,
            },
        })
    }

    pub fn generator_ids(&self) -> Vec<ParamId> {
        self.params.ids().filter(|&id| self.params.name(id).starts_with("gen.")).collect()
    }

    pub fn discriminator_ids(&self) -> Vec<ParamId> {
        self.params.ids().filter(|&id| self.params.name(id).starts_with("disc.")).collect()
    }

    pub fn feature_head_id(&self) -> ParamId {
        self.ids.feat_w
    }

    /// Replaces `params` after a checkpoint load; names and shapes must match.
    pub fn load_params(&mut self, mut params: ParamStore) -> Result<()> {
        params.rebuild_index();
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint("parameter count mismatch".into()));
        }
        for ((_, a), (_, b)) in self.params.iter().zip(params.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Checkpoint(format!("parameter {} does not match architecture", b.name)));
            }
        }
        self.params = params;
        Ok(())
    }

    fn p(g: &mut Graph, id: ParamId, mode: Mode) -> NodeId {
        match mode {
            Mode::Train => g.param(id),
            Mode::Frozen => g.frozen_param(id),
        }
    }

    /// Generator graph on a latent batch `h` (`n × d`), returning `n × pixels`
    /// in `(−1, 1)`, plus each stage's pre-injection activations.
    pub fn generator_graph_traced(&self, g: &mut Graph, h: NodeId, mode: Mode) -> Result<(NodeId, Vec<NodeId>)> {
        let n = g.value(h).rows();
        if g.value(h).cols() != self.arch.latent_dim {
            return dim_err(format!("latent width {} vs {}", g.value(h).cols(), self.arch.latent_dim));
        }
        let ones = g.input(Matrix::filled(n, 1, 1.0));
        let c = Self::p(g, self.ids.gen_const, mode);
        let mut z = g.matmul(ones, c)?;
        let mut pre = Vec::with_capacity(self.arch.stages);
        for (k, (lo, hi)) in self.arch.partitions().into_iter().enumerate() {
            let st = &self.ids.stages[k];
            let aw = Self::p(g, st.a_w, mode);
            let ab = Self::p(g, st.a_b, mode);
            let a = g.matmul(z, aw)?;
            let a = g.add_row(a, ab)?;
            let act = g.leaky_relu(a, self.arch.leaky_slope);
            pre.push(act);
            let hk = g.slice_cols(h, lo, hi)?;
            let bw = Self::p(g, st.inj, mode);
            let inj = g.matmul(hk, bw)?;
            let mask = g.add_scalar(inj, 1.0);
            let injected = g.hadamard(act, mask)?;
            z = g.add(injected, z)?;
        }
        let ow = Self::p(g, self.ids.out_w, mode);
        let ob = Self::p(g, self.ids.out_b, mode);
        let o = g.matmul(z, ow)?;
        let o = g.add_row(o, ob)?;
        Ok((g.tanh(o), pre))
    }

    pub fn generator_graph(&self, g: &mut Graph, h: NodeId, mode: Mode) -> Result<NodeId> {
        Ok(self.generator_graph_traced(g, h, mode)?.0)
    }

    pub fn discriminator_graph(&self, g: &mut Graph, x: NodeId, mode: Mode) -> Result<DiscNodes> {
        if g.value(x).cols() != self.arch.image.len() {
            return dim_err(format!("image length {} vs {}", g.value(x).cols(), self.arch.image.len()));
        }
        let mut a = x;
        for &(w, b) in &self.ids.body {
            let wn = Self::p(g, w, mode);
            let bn = Self::p(g, b, mode);
            let m = g.matmul(a, wn)?;
            let m = g.add_row(m, bn)?;
            a = g.leaky_relu(m, self.arch.leaky_slope);
        }
        let v = a;
        let aw = Self::p(g, self.ids.adv_w, mode);
        let ab = Self::p(g, self.ids.adv_b, mode);
        let adv = g.matmul(v, aw)?;
        let adv = g.add_row(adv, ab)?;
        let fw = Self::p(g, self.ids.feat_w, mode);
        let phi = g.matmul(v, fw)?;
        Ok(DiscNodes { adv, v, phi })
    }

    /// Masking classifier logits from the feature difference
    /// `Φ(G(ĥ)) − Φ(G(h))`; the head sees the difference and its square.
    pub fn masking_logits(&self, g: &mut Graph, delta: NodeId, mode: Mode) -> Result<NodeId> {
        let sq = g.square(delta);
        let input = g.concat_cols(&[delta, sq])?;
        let w = Self::p(g, self.ids.mask_w, mode);
        let b = Self::p(g, self.ids.mask_b, mode);
        let l = g.matmul(input, w)?;
        g.add_row(l, b)
    }

    /// Scores, penultimate features and feature-head outputs for a batch.
    pub fn discriminate_batch(&self, x: &Matrix) -> Result<(Vec<f64>, Matrix, Matrix)> {
        let mut g = Graph::new(&self.params);
        let xi = g.input(x.clone());
        let out = self.discriminator_graph(&mut g, xi, Mode::Frozen)?;
        Ok((g.value(out.adv).as_slice().to_vec(), g.value(out.v).clone(), g.value(out.phi).clone()))
    }

    pub fn discriminate(&self, x: &Image) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        if x.shape != self.arch.image {
            return dim_err(format!("image {:?} vs {:?}", x.shape, self.arch.image));
        }
        let m = Matrix::from_vec(1, x.data.len(), x.data.clone())?;
        let (adv, v, phi) = self.discriminate_batch(&m)?;
        Ok((adv[0], v.into_vec(), phi.into_vec()))
    }

    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.discriminate_batch(x)?.2)
    }

    /// Masking-head class probabilities for a batch of feature differences.
    pub fn masking_predict(&self, delta: &Matrix) -> Result<Vec<usize>> {
        let mut g = Graph::new(&self.params);
        let d = g.input(delta.clone());
        let l = self.masking_logits(&mut g, d, Mode::Frozen)?;
        let v = g.value(l);
        Ok((0..v.rows())
            .map(|r| {
                v.row(r)
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
                    .0
            })
            .collect())
    }
}

impl ImageGenerator for GanModel {
    fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn image_shape(&self) -> ImageShape {
        self.arch.image
    }

    fn generate_batch(&self, h: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new(&self.params);
        let hi = g.input(h.clone());
        let out = self.generator_graph(&mut g, hi, Mode::Frozen)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::autodiff::GradStore;
    use rand::Rng;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            image: ImageShape::new(1, 4, 4),
            latent_dim: 8,
            stages: 2,
            gen_width: 6,
            disc_widths: vec![5, 4],
            feature_dim: 8,
            ..Default::default()
        }
    }

    #[test]
    fn partitions_follow_latent_order() {
        let arch = small_arch();
        assert_eq!(arch.partitions(), vec![(0, 4), (4, 8)]);
        assert!(ArchConfig { stages: 3, ..arch }.validate().is_err());
    }

    #[test]
    fn zero_code_gives_identity_masks() {
        let m = GanModel::new(small_arch()).unwrap();
        let mut g = Graph::new(&m.params);
        let h = g.input(Matrix::zeros(1, 8));
        let out = m.generator_graph(&mut g, h, Mode::Frozen).unwrap();
        // unconditional pass: z_{k+1} = act(A z_k + b) + z_k, then tanh(P z + p)
        let p = &m.params;
        let mut z = p.get(m.ids.gen_const).clone();
        for st in &m.ids.stages {
            let a = z.matmul(p.get(st.a_w)).unwrap().add(p.get(st.a_b)).unwrap();
            let act = a.map(|x| if x > 0.0 { x } else { 0.2 * x });
            z = act.add(&z).unwrap();
        }
        let o = z.matmul(p.get(m.ids.out_w)).unwrap().add(p.get(m.ids.out_b)).unwrap().map(f64::tanh);
        for (a, b) in g.value(out).as_slice().iter().zip(o.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn outputs_in_range_and_pure() {
        let m = GanModel::new(small_arch()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Matrix::from_vec(5, 8, (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let a = m.generate_batch(&h).unwrap();
        assert!(a.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a, m.generate_batch(&h).unwrap());
        assert!(m.generate(&[0.0; 3]).is_err());
    }

    #[test]
    fn later_partitions_do_not_touch_earlier_stages() {
        let m = GanModel::new(small_arch()).unwrap();
        let run = |h: Vec<f64>| {
            let mut g = Graph::new(&m.params);
            let hi = g.input(Matrix::from_vec(1, 8, h).unwrap());
            let (_, pre) = m.generator_graph_traced(&mut g, hi, Mode::Frozen).unwrap();
            pre.iter().map(|&n| g.value(n).clone()).collect::<Vec<_>>()
        };
        let base = run(vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, 0.8]);
        let changed = run(vec![0.1, -0.2, 0.3, 0.4, -0.9, 0.2, 0.0, 0.1]);
        // partition 1 (indices 4..8) changed: stages 0 and 1 pre-injection equal
        assert_eq!(base[0], changed[0]);
        assert_eq!(base[1], changed[1]);
        let changed0 = run(vec![0.9, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, 0.8]);
        assert_eq!(base[0], changed0[0]);
        assert_ne!(base[1], changed0[1]);
    }

    #[test]
    fn identity_feature_head_passes_penultimate() {
        let arch = ArchConfig {
            feature_dim: 4,
            ..small_arch()
        };
        let mut m = GanModel::new(arch).unwrap();
        *m.params.get_mut(m.ids.feat_w) = Matrix::identity(4);
        let x = Image::filled(ImageShape::new(1, 4, 4), 0.3);
        let (_, v, phi) = m.discriminate(&x).unwrap();
        assert_eq!(v, phi);
    }

    #[test]
    fn batch_equals_single_passes() {
        let m = GanModel::new(small_arch()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Matrix::from_vec(2, 16, (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (adv, _, phi) = m.discriminate_batch(&x).unwrap();
        for r in 0..2 {
            let img = Image::new(ImageShape::new(1, 4, 4), x.row(r).to_vec()).unwrap();
            let (a1, _, p1) = m.discriminate(&img).unwrap();
            assert!((a1 - adv[r]).abs() < 1e-12);
            assert!(p1.iter().zip(phi.row(r)).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn feature_head_is_linear_in_v() {
        let m = GanModel::new(small_arch()).unwrap();
        let x = Image::filled(ImageShape::new(1, 4, 4), 0.5);
        let (_, v, phi) = m.discriminate(&x).unwrap();
        let w = m.params.get(m.ids.feat_w);
        let vv = Matrix::from_vec(1, v.len(), v.iter().map(|x| 3.0 * x).collect()).unwrap();
        let scaled = vv.matmul(w).unwrap();
        for (a, b) in scaled.as_slice().iter().zip(&phi) {
            assert!((a - 3.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn full_network_gradient_matches_finite_differences() {
        let m = GanModel::new(small_arch()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = Matrix::from_vec(3, 8, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let loss = |store: &ParamStore, grads: Option<&mut GradStore>| {
            let mm = GanModel {
                arch: m.arch.clone(),
                params: store.clone(),
                ids: m.ids.clone(),
            };
            let mut g = Graph::new(&mm.params);
            let hi = g.input(h.clone());
            let x = mm.generator_graph(&mut g, hi, Mode::Train).unwrap();
            let d = mm.discriminator_graph(&mut g, x, Mode::Train).unwrap();
            let a = g.mean(d.adv);
            let diff = g.sub(d.phi, hi).unwrap();
            let sq = g.square(diff);
            let c = g.mean(sq);
            let total = g.add(a, c).unwrap();
            if let Some(gr) = grads {
                g.backward(total, gr).unwrap();
            }
            g.scalar(total)
        };
        let mut grads = GradStore::for_store(&m.params);
        loss(&m.params, Some(&mut grads));
        let hstep = 1e-6;
        let mut probes = 0;
        for id in m.params.ids() {
            let n = m.params.get(id).as_slice().len();
            for i in [0, n / 2, n - 1] {
                let an = grads.get(id).as_slice()[i];
                let mut s = m.params.clone();
                s.get_mut(id).as_mut_slice()[i] += hstep;
                let up = loss(&s, None);
                s.get_mut(id).as_mut_slice()[i] -= 2.0 * hstep;
                let dn = loss(&s, None);
                let fd = (up - dn) / (2.0 * hstep);
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-5);
                assert!(rel <= 1e-4, "{}[{i}]: fd {fd} analytic {an}", m.params.name(id));
                probes += 1;
            }
        }
        assert!(probes >= 20);
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::image::{Image, ImageShape};
use crate::nets::model::ImageGenerator;
use crate::tensor::Matrix;

use super::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactorRole {
    /// Centre x as a fraction of the width.
    XPos,
    YPos,
    /// Half-extent as a fraction of the width.
    Scale,
    /// Radians.
    Rotation,
    /// Foreground intensity in `[−1, 1]`.
    Shade,
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub name: String,
    pub role: FactorRole,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Triangle,
    Square,
    Disk,
}

/// Renderer configuration: one shape, up to eight continuous factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub shape: ShapeKind,
    pub image: ImageShape,
    pub factors: Vec<Factor>,
    /// Samples per pixel along each axis.
    pub supersample: usize,
}

const MAX_FACTORS: usize = 8;

impl Default for FactorSpec {
    fn default() -> Self {
        let f = |name: &str, role, min, max| Factor {
            name: name.into(),
            role,
            min,
            max,
        };
        Self {
            shape: ShapeKind::Triangle,
            image: ImageShape::new(1, 32, 32),
            factors: vec![
                f("x", FactorRole::XPos, 0.3, 0.7),
                f("y", FactorRole::YPos, 0.3, 0.7),
                f("scale", FactorRole::Scale, 0.12, 0.28),
                f("rotation", FactorRole::Rotation, -0.5, 0.5),
                f("shade", FactorRole::Shade, 0.1, 1.0),
                f("background", FactorRole::Background, -1.0, -0.4),
            ],
            supersample: 4,
        }
    }
}

impl FactorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() || self.factors.len() > MAX_FACTORS {
            return Err(Error::Config(format!("factor count {} outside 1..={MAX_FACTORS}", self.factors.len())));
        }
        if let Some(f) = self.factors.iter().find(|f| !(f.min < f.max)) {
            return Err(Error::Config(format!("factor {} has empty range", f.name)));
        }
        if self.image.is_empty() || self.supersample == 0 {
            return Err(Error::Config("renderer image and supersampling must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    /// Midpoint of every range.
    pub fn centre(&self) -> Vec<f64> {
        self.factors.iter().map(|f| 0.5 * (f.min + f.max)).collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.factors.iter().map(|f| rng.random_range(f.min..=f.max)).collect()
    }

    fn value(&self, factors: &[f64], role: FactorRole, default: f64) -> f64 {
        self.factors.iter().zip(factors).find(|(f, _)| f.role == role).map_or(default, |(_, &v)| v)
    }
}

fn inside(kind: ShapeKind, x: f64, y: f64) -> bool {
    match kind {
        ShapeKind::Disk => x * x + y * y <= 1.0,
        ShapeKind::Square => x.abs() <= 1.0 && y.abs() <= 1.0,
        ShapeKind::Triangle => {
            // isosceles, apex up; not rotationally symmetric within ±π/3
            const V: [(f64, f64); 3] = [(0.0, -1.2), (-0.75, 0.75), (0.75, 0.75)];
            let edge = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
            let s = [edge(V[0], V[1]), edge(V[1], V[2]), edge(V[2], V[0])];
            s.iter().all(|&v| v >= 0.0) || s.iter().all(|&v| v <= 0.0)
        }
    }
}

/// Anti-aliased raster of one shape; factors are checked against their ranges.
pub fn render(spec: &FactorSpec, factors: &[f64]) -> Result<Image> {
    spec.validate()?;
    if factors.len() != spec.len() {
        return dim_err(format!("{} factors for a spec with {}", factors.len(), spec.len()));
    }
    for (f, &v) in spec.factors.iter().zip(factors) {
        if !(v >= f.min - 1e-12 && v <= f.max + 1e-12) {
            return Err(Error::InvalidArgument(format!("factor {} = {v} outside [{}, {}]", f.name, f.min, f.max)));
        }
    }
    let ImageShape { channels, height, width } = spec.image;
    let cx = spec.value(factors, FactorRole::XPos, 0.5) * width as f64;
    let cy = spec.value(factors, FactorRole::YPos, 0.5) * height as f64;
    let s = spec.value(factors, FactorRole::Scale, 0.25) * width as f64;
    let th = spec.value(factors, FactorRole::Rotation, 0.0);
    let fg = spec.value(factors, FactorRole::Shade, 1.0);
    let bg = spec.value(factors, FactorRole::Background, -1.0);
    let (sin, cos) = th.sin_cos();
    let ss = spec.supersample;
    let inv = 1.0 / (ss * ss) as f64;
    let mut plane = vec![0.0; height * width];
    for py in 0..height {
        for px in 0..width {
            let mut hits = 0usize;
            for sy in 0..ss {
                for sx in 0..ss {
                    let x = px as f64 + (sx as f64 + 0.5) / ss as f64 - cx;
                    let y = py as f64 + (sy as f64 + 0.5) / ss as f64 - cy;
                    // rotate into the shape frame
                    let lx = (cos * x + sin * y) / s;
                    let ly = (-sin * x + cos * y) / s;
                    hits += inside(spec.shape, lx, ly) as usize;
                }
            }
            let cov = hits as f64 * inv;
            plane[py * width + px] = bg + cov * (fg - bg);
        }
    }
    let mut data = Vec::with_capacity(spec.image.len());
    for _ in 0..channels {
        data.extend_from_slice(&plane);
    }
    Image::new(spec.image, data)
}

/// `n` renders with uniformly drawn factors; factors kept for evaluation.
pub fn shapes_dataset(spec: &FactorSpec, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset("shapes corpus of size 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Matrix::zeros(n, spec.image.len());
    let mut factors = Matrix::zeros(n, spec.len());
    for i in 0..n {
        let f = spec.sample(&mut rng);
        images.row_mut(i).copy_from_slice(&render(spec, &f)?.data);
        factors.row_mut(i).copy_from_slice(&f);
    }
    Ok(Dataset {
        shape: spec.image,
        images,
        factors: Some(factors),
    })
}

/// Hand-built generator in which latent element `k` drives factor `k`
/// linearly over its range; elements beyond the factor count are ignored.
#[derive(Debug, Clone)]
pub struct RendererGenerator {
    pub spec: FactorSpec,
    pub latent_dim: usize,
}

impl RendererGenerator {
    pub fn new(spec: FactorSpec, latent_dim: usize) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, latent_dim })
    }

    pub fn factors_for(&self, h: &[f64]) -> Vec<f64> {
        let mut f = self.spec.centre();
        for (k, fac) in self.spec.factors.iter().enumerate() {
            if let Some(&v) = h.get(k) {
                let t = 0.5 * (v.clamp(-1.0, 1.0) + 1.0);
                f[k] = fac.min + t * (fac.max - fac.min);
            }
        }
        f
    }
}

impl ImageGenerator for RendererGenerator {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn image_shape(&self) -> ImageShape {
        self.spec.image
    }

    fn generate_batch(&self, h: &Matrix) -> Result<Matrix> {
        if h.cols() != self.latent_dim {
            return dim_err(format!("latent width {} vs {}", h.cols(), self.latent_dim));
        }
        let mut out = Matrix::zeros(h.rows(), self.spec.image.len());
        for r in 0..h.rows() {
            out.row_mut(r).copy_from_slice(&render(&self.spec, &self.factors_for(h.row(r)))?.data);
        }
        Ok(out)
    }
}

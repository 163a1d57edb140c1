//! Quadratic minimizers of the depth and intrinsic energies, solved with Jacobi-preconditioned
//! conjugate gradients.
//!
//! Depth, per pixel grid:
//!
//! ```text
//! (k·I + λ_D ∇ᵀ∇) D = D* [+ D_prev] + λ_D ∇ᵀ g_D,     k = 1, or 2 with a previous level
//! ```
//!
//! Albedo and shading, per color channel, with `W = diag(L²)` and `k_p` = 1 with a previous level
//! and 0 without:
//!
//! ```text
//! | W + k_p + λ_A ∇ᵀ∇   W                 | |A|   | W·I + k_p A_prev + λ_A ∇ᵀ g_A |
//! | W                   W + k_p + λ_S ∇ᵀ∇ | |S| = | W·I + k_p S_prev + λ_S ∇ᵀ g_S |
//! ```
//!
//! Without a previous level the intrinsic matrix has the null vector `(1, −1)` (a constant can
//! move from albedo to shading). The right-hand side is always orthogonal to it, so adding
//! `μ·n·nᵀ` yields an SPD system whose solution is the minimizer with `mean(A) = mean(S)`.

use crate::error::{Error, Result};
use crate::image::{Domain, GradientField, Image};
use crate::tensor::Tensor;

/// Result of a conjugate-gradient run.
#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Final relative residual `‖b − Ax‖ / ‖b‖`.
    pub residual: f64,
    /// Relative residual after each iteration.
    pub residual_trace: Vec<f64>,
    /// Quadratic objective `½xᵀAx − bᵀx` after each iteration.
    pub objective_trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `A x = b` for symmetric positive definite `A` given as a matrix-free operator.
/// `diag` enables Jacobi preconditioning; `x0` is the starting point (zero if `None`).
pub fn cg_solve<F>(apply: F, rhs: &[f64], diag: Option<&[f64]>, x0: Option<&[f64]>, tol: f64, max_iters: usize) -> Result<CgOutcome>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = rhs.len();
    let b_norm = dot(rhs, rhs).sqrt();
    if b_norm == 0.0 {
        return Ok(CgOutcome {
            x: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
            residual_trace: Vec::new(),
            objective_trace: Vec::new(),
        });
    }
    if let Some(d) = diag {
        if d.len() != n || d.iter().any(|v| v.is_nan() || *v <= 0.0) {
            return Err(Error::InvalidArgument("preconditioner diagonal must be positive".into()));
        }
    }
    let precondition = |r: &[f64], z: &mut [f64]| match diag {
        Some(d) => z.iter_mut().zip(r).zip(d).for_each(|((z, r), d)| *z = r / d),
        None => z.copy_from_slice(r),
    };
    let mut x = x0.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    let mut ax = vec![0.0; n];
    apply(&x, &mut ax);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut z = vec![0.0; n];
    precondition(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut residual = dot(&r, &r).sqrt() / b_norm;
    let objective = |x: &[f64], r: &[f64]| -0.5 * (dot(x, rhs) + dot(x, r));
    let mut residual_trace = Vec::new();
    let mut objective_trace = Vec::new();
    let mut iterations = 0;
    while residual > tol {
        if iterations >= max_iters {
            return Err(Error::NotConverged { iterations, residual });
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap.is_nan() || pap <= 0.0 {
            return Err(Error::Singular(format!("operator is not positive definite (pᵀAp = {pap:e})")));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        precondition(&r, &mut z);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        iterations += 1;
        residual = dot(&r, &r).sqrt() / b_norm;
        residual_trace.push(residual);
        objective_trace.push(objective(&x, &r));
    }
    Ok(CgOutcome {
        x,
        iterations,
        residual,
        residual_trace,
        objective_trace,
    })
}

/// `out += scale · ∇ᵀ∇ x` on an `h×w` single-channel grid.
fn add_laplacian(x: &[f64], h: usize, w: usize, scale: f64, out: &mut [f64]) {
    if scale == 0.0 {
        return;
    }
    for y in 0..h {
        for xx in 0..w {
            let i = y * w + xx;
            if xx + 1 < w {
                let d = scale * (x[i] - x[i + 1]);
                out[i] += d;
                out[i + 1] -= d;
            }
            if y + 1 < h {
                let d = scale * (x[i] - x[i + w]);
                out[i] += d;
                out[i + w] -= d;
            }
        }
    }
}

/// Diagonal of `∇ᵀ∇`: the number of 4-neighbors of each pixel.
fn laplacian_diag(h: usize, w: usize) -> Vec<f64> {
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            [x > 0, x + 1 < w, y > 0, y + 1 < h].iter().filter(|&&b| b).count() as f64
        })
        .collect()
}

/// `∇ᵀ g` for channel `c` of a gradient field.
fn divergence_channel(g: &GradientField, c: usize) -> Vec<f64> {
    let (h, w, _) = g.shape();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let gx = g.gx.at(y, x, c);
            let gy = g.gy.at(y, x, c);
            if x + 1 < w {
                out[i] -= gx;
                out[i + 1] += gx;
            }
            if y + 1 < h {
                out[i] -= gy;
                out[i + w] += gy;
            }
        }
    }
    out
}

fn check_field(op: &'static str, g: &GradientField, h: usize, w: usize, c: usize) -> Result<()> {
    if g.shape() != (h, w, c) {
        return Err(Error::shape(op, format!("guided gradients {h}x{w}x{c}"), format!("{:?}", g.shape())));
    }
    Ok(())
}

fn check_image(op: &'static str, name: &str, img: &Image, h: usize, w: usize, c: usize) -> Result<()> {
    if img.shape() != (h, w, c) {
        return Err(Error::shape(op, format!("{name} {h}x{w}x{c}"), format!("{:?}", img.shape())));
    }
    Ok(())
}

/// Depth energy `Σ(D − D*)² [+ Σ(D − D_prev)²] + λ Σ‖∇D − g‖²`.
#[derive(Clone, Copy, Debug)]
pub struct DepthSystem<'a> {
    pub depth_star: &'a Image,
    pub prev: Option<&'a Image>,
    pub guided: &'a GradientField,
    pub lambda: f64,
}

impl DepthSystem<'_> {
    fn dims(&self) -> (usize, usize) {
        (self.depth_star.height(), self.depth_star.width())
    }

    fn check(&self) -> Result<()> {
        let (h, w) = self.dims();
        check_image("solve_depth", "D*", self.depth_star, h, w, 1)?;
        if let Some(p) = self.prev {
            check_image("solve_depth", "previous depth", p, h, w, 1)?;
        }
        check_field("solve_depth", self.guided, h, w, 1)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda_D must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    fn data_weight(&self) -> f64 {
        if self.prev.is_some() {
            2.0
        } else {
            1.0
        }
    }

    /// `A x` for the system matrix.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let (h, w) = self.dims();
        let k = self.data_weight();
        out.iter_mut().zip(x).for_each(|(o, v)| *o = k * v);
        add_laplacian(x, h, w, self.lambda, out);
    }

    pub fn rhs(&self) -> Vec<f64> {
        let div = divergence_channel(self.guided, 0);
        (0..self.depth_star.len())
            .map(|i| {
                let prev = self.prev.map_or(0.0, |p| p.data()[i]);
                self.depth_star.data()[i] + prev + self.lambda * div[i]
            })
            .collect()
    }

    /// Value of the energy at `d`.
    pub fn energy(&self, d: &Image) -> Result<f64> {
        let (h, w) = self.dims();
        check_image("depth energy", "D", d, h, w, 1)?;
        let mut e = crate::energy::unary_depth(d, self.depth_star)?;
        if let Some(p) = self.prev {
            e += crate::energy::anchor_term(d, p)?;
        }
        let g = crate::image::forward_gradient(d)?;
        Ok(e + self.lambda * crate::energy::guided_residual(&g, self.guided)?)
    }

    pub fn solve(&self, tol: f64, max_iters: Option<usize>, warm_start: Option<&Image>) -> Result<Image> {
        self.check()?;
        let (h, w) = self.dims();
        let k = self.data_weight();
        let diag: Vec<f64> = laplacian_diag(h, w).iter().map(|d| k + self.lambda * d).collect();
        let out = cg_solve(
            |x, y| self.apply(x, y),
            &self.rhs(),
            Some(&diag),
            warm_start.map(|d| d.data()),
            tol,
            max_iters.unwrap_or(10 * h * w),
        )?;
        Image::from_vec(h, w, 1, out.x, Domain::Log)
    }
}

/// Solves for the depth minimizing `Σ(D − D*)² [+ Σ(D − D_prev)²] + λ_D Σ‖∇D − g‖²`.
pub fn solve_depth(
    depth_star: &Image,
    prev: Option<&Image>,
    guided: &GradientField,
    lambda: f64,
    tol: f64,
    max_iters: Option<usize>,
) -> Result<Image> {
    DepthSystem {
        depth_star,
        prev,
        guided,
        lambda,
    }
    .solve(tol, max_iters, None)
}

/// Intrinsic energy `Σ(L(I − A − S))² [+ anchors] + λ_A Σ‖∇A − g_A‖² + λ_S Σ‖∇S − g_S‖²`.
#[derive(Clone, Copy, Debug)]
pub struct IntrinsicSystem<'a> {
    pub image: &'a Image,
    /// Single-channel weight `L`.
    pub luminance: &'a Image,
    pub guided_albedo: &'a GradientField,
    pub guided_shading: &'a GradientField,
    pub prev: Option<(&'a Image, &'a Image)>,
    pub lambda_albedo: f64,
    pub lambda_shading: f64,
}

/// One color channel of the coupled system, unknowns ordered `(A, S)`.
struct ChannelSystem<'s> {
    h: usize,
    w: usize,
    weight: &'s [f64],
    anchor: f64,
    lambda_a: f64,
    lambda_s: f64,
    /// Gauge term weight `μ`, zero when the system is already definite.
    gauge: f64,
}

impl ChannelSystem<'_> {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = self.h * self.w;
        let (a, s) = x.split_at(n);
        let (oa, os) = out.split_at_mut(n);
        for i in 0..n {
            let wsum = self.weight[i] * (a[i] + s[i]);
            oa[i] = wsum + self.anchor * a[i];
            os[i] = wsum + self.anchor * s[i];
        }
        add_laplacian(a, self.h, self.w, self.lambda_a, oa);
        add_laplacian(s, self.h, self.w, self.lambda_s, os);
        if self.gauge > 0.0 {
            let proj = self.gauge * (a.iter().sum::<f64>() - s.iter().sum::<f64>());
            oa.iter_mut().for_each(|v| *v += proj);
            os.iter_mut().for_each(|v| *v -= proj);
        }
    }

    fn diag(&self) -> Vec<f64> {
        let lap = laplacian_diag(self.h, self.w);
        let mut d = Vec::with_capacity(2 * lap.len());
        for lambda in [self.lambda_a, self.lambda_s] {
            d.extend(lap.iter().zip(self.weight).map(|(l, wt)| wt + self.anchor + lambda * l + self.gauge));
        }
        d
    }
}

impl IntrinsicSystem<'_> {
    fn dims(&self) -> (usize, usize) {
        (self.image.height(), self.image.width())
    }

    fn check(&self) -> Result<()> {
        let (h, w) = self.dims();
        self.image.expect_domain("solve_intrinsic", Domain::Log)?;
        check_image("solve_intrinsic", "I", self.image, h, w, 3)?;
        check_image("solve_intrinsic", "L", self.luminance, h, w, 1)?;
        check_field("solve_intrinsic", self.guided_albedo, h, w, 3)?;
        check_field("solve_intrinsic", self.guided_shading, h, w, 3)?;
        if let Some((a, s)) = self.prev {
            check_image("solve_intrinsic", "previous albedo", a, h, w, 3)?;
            check_image("solve_intrinsic", "previous shading", s, h, w, 3)?;
        }
        for l in [self.lambda_albedo, self.lambda_shading] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidArgument(format!("lambda weights must be >= 0, got {l}")));
            }
        }
        if self.prev.is_none() {
            let lum = self.luminance.data();
            if lum.iter().all(|&l| l == 0.0) {
                return Err(Error::Singular(
                    "image-formation weight is zero everywhere and there is no previous level".into(),
                ));
            }
            if self.lambda_albedo == 0.0 && self.lambda_shading == 0.0 {
                return Err(Error::Singular("lambda_A = lambda_S = 0 leaves albedo/shading undetermined".into()));
            }
            if (self.lambda_albedo == 0.0 || self.lambda_shading == 0.0) && lum.contains(&0.0) {
                return Err(Error::Singular(
                    "a zero gradient weight with zero image-formation weight leaves pixels undetermined".into(),
                ));
            }
        }
        Ok(())
    }

    fn channel<'w>(&self, weight: &'w [f64]) -> ChannelSystem<'w> {
        let (h, w) = self.dims();
        let anchor = if self.prev.is_some() { 1.0 } else { 0.0 };
        let gauge = if self.prev.is_some() {
            0.0
        } else {
            weight.iter().sum::<f64>() / weight.len() as f64 + self.lambda_albedo + self.lambda_shading
        };
        ChannelSystem {
            h,
            w,
            weight,
            anchor,
            lambda_a: self.lambda_albedo,
            lambda_s: self.lambda_shading,
            gauge: gauge / (h * w) as f64,
        }
    }

    fn weights(&self) -> Vec<f64> {
        self.luminance.data().iter().map(|l| l * l).collect()
    }

    /// `A x` for channel `c`; `x` holds `(A, S)` of that channel.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let weight = self.weights();
        self.channel(&weight).apply(x, out);
    }

    fn rhs(&self, c: usize, weight: &[f64]) -> Vec<f64> {
        let n = weight.len();
        let div_a = divergence_channel(self.guided_albedo, c);
        let div_s = divergence_channel(self.guided_shading, c);
        let mut b = vec![0.0; 2 * n];
        for i in 0..n {
            let wi = weight[i] * self.image.data()[i * 3 + c];
            let (pa, ps) = self
                .prev
                .map_or((0.0, 0.0), |(a, s)| (a.data()[i * 3 + c], s.data()[i * 3 + c]));
            b[i] = wi + pa + self.lambda_albedo * div_a[i];
            b[n + i] = wi + ps + self.lambda_shading * div_s[i];
        }
        b
    }

    /// Value of the energy at `(a, s)`.
    pub fn energy(&self, a: &Image, s: &Image) -> Result<f64> {
        let mut e = crate::energy::unary_intrinsic(self.image, a, s, self.luminance)?;
        if let Some((pa, ps)) = self.prev {
            e += crate::energy::anchor_term(a, pa)? + crate::energy::anchor_term(s, ps)?;
        }
        let ga = crate::image::forward_gradient(a)?;
        let gs = crate::image::forward_gradient(s)?;
        Ok(e + self.lambda_albedo * crate::energy::guided_residual(&ga, self.guided_albedo)?
            + self.lambda_shading * crate::energy::guided_residual(&gs, self.guided_shading)?)
    }

    pub fn solve(&self, tol: f64, max_iters: Option<usize>, warm_start: Option<(&Image, &Image)>) -> Result<(Image, Image)> {
        self.check()?;
        let (h, w) = self.dims();
        let n = h * w;
        let weight = self.weights();
        let sys = self.channel(&weight);
        let diag = sys.diag();
        let mut albedo = Tensor::zeros(h, w, 3);
        let mut shading = Tensor::zeros(h, w, 3);
        for c in 0..3 {
            let x0: Option<Vec<f64>> = warm_start.map(|(a, s)| {
                (0..2 * n)
                    .map(|i| if i < n { a.data()[i * 3 + c] } else { s.data()[(i - n) * 3 + c] })
                    .collect()
            });
            let out = cg_solve(
                |x, y| sys.apply(x, y),
                &self.rhs(c, &weight),
                Some(&diag),
                x0.as_deref(),
                tol,
                max_iters.unwrap_or(10 * 2 * n),
            )
            .map_err(|e| e.context(format!("color channel {c}")))?;
            for i in 0..n {
                albedo.data_mut()[i * 3 + c] = out.x[i];
                shading.data_mut()[i * 3 + c] = out.x[n + i];
            }
        }
        Ok((Image::new(albedo, Domain::Log), Image::new(shading, Domain::Log)))
    }
}

/// Solves for the albedo and shading minimizing the intrinsic energy.
#[allow(clippy::too_many_arguments)]
pub fn solve_intrinsic(
    image: &Image,
    luminance: &Image,
    guided_albedo: &GradientField,
    guided_shading: &GradientField,
    prev: Option<(&Image, &Image)>,
    lambda_albedo: f64,
    lambda_shading: f64,
    tol: f64,
    max_iters: Option<usize>,
) -> Result<(Image, Image)> {
    IntrinsicSystem {
        image,
        luminance,
        guided_albedo,
        guided_shading,
        prev,
        lambda_albedo,
        lambda_shading,
    }
    .solve(tol, max_iters, None)
}

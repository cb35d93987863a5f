//! Covariance transforms that move the estimator's unobservable subspace from
//! the pre-step estimate `x̂⁻` to the post-step estimate `x̂⁺` without
//! touching the state mean.
//!
//! Both transforms are applied as `P ← T⁻¹ P T⁻ᵀ` in `O(N²)`.

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};

use crate::error::{Result, SwfError};
use crate::geometry::{skew, Mat3, Vec3};
use crate::linalg::repair_psd;
use crate::observability::build_aux;
use crate::state::{ErrorLayout, SwfState};

/// Below this `|1 + βᵀα|` the rank-one transform is treated as singular.
pub const SINGULAR_TOL: f64 = 1e-12;

/// `T = I + αβᵀ` with `T·N(x̂⁺) = N(x̂⁻)` and minimal `‖T − I‖_F`.
#[derive(Clone, Debug)]
pub struct DirectTransform {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
}

/// `T⁻¹ = I + α'βᵀ` with `α' = −α / (1 + βᵀα)`.
#[derive(Clone, Debug)]
pub struct DirectInverse {
    pub alpha_prime: DVector<f64>,
    pub beta: DVector<f64>,
}

/// Builds the rank-one transform from the bases before and after a step.
/// The translation columns of both bases must coincide.
pub fn make_direct(n_minus: &DMatrix<f64>, n_plus: &DMatrix<f64>) -> Result<DirectTransform> {
    if n_minus.shape() != n_plus.shape() || n_plus.ncols() != 4 {
        return Err(SwfError::DimensionMismatch { expected: n_plus.nrows(), got: n_minus.nrows() });
    }
    let alpha = n_minus.column(3) - n_plus.column(3);
    let gram: Matrix4<f64> = {
        let g = n_plus.transpose() * n_plus;
        Matrix4::from_iterator(g.iter().copied())
    };
    let y = gram
        .cholesky()
        .ok_or(SwfError::RankDeficient)?
        .solve(&Vector4::new(0.0, 0.0, 0.0, 1.0));
    let beta = n_plus * DVector::from_column_slice(y.as_slice());
    let t = DirectTransform { alpha, beta };
    t.denominator()?;
    Ok(t)
}

impl DirectTransform {
    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    fn denominator(&self) -> Result<f64> {
        let d = 1.0 + self.beta.dot(&self.alpha);
        if d.abs() < SINGULAR_TOL {
            return Err(SwfError::SingularTransform(d));
        }
        Ok(d)
    }

    pub fn dense(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim()) + &self.alpha * self.beta.transpose()
    }
}

/// Closed-form inverse of the rank-one transform.
pub fn invert_direct(t: &DirectTransform) -> Result<DirectInverse> {
    let d = t.denominator()?;
    Ok(DirectInverse { alpha_prime: -&t.alpha / d, beta: t.beta.clone() })
}

impl DirectInverse {
    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.beta.len();
        DMatrix::identity(n, n) + &self.alpha_prime * self.beta.transpose()
    }

    /// `m ← T⁻¹ m`.
    pub fn apply_left(&self, m: &mut DMatrix<f64>) {
        let bt_m = self.beta.transpose() * &*m;
        m.ger(1.0, &self.alpha_prime, &bt_m.transpose(), 1.0);
    }
}

/// `P ← T⁻¹ P T⁻ᵀ` for the rank-one transform.
pub fn apply_direct(p: &mut DMatrix<f64>, t: &DirectTransform) -> Result<()> {
    let inv = invert_direct(t)?;
    apply_direct_inverse(p, &inv);
    Ok(())
}

/// `P + A + Aᵀ + B` with `A = α'(Pβ)ᵀ`, `B = (βᵀPβ) α'α'ᵀ`.
pub fn apply_direct_inverse(p: &mut DMatrix<f64>, inv: &DirectInverse) {
    let u = &*p * &inv.beta;
    let c = inv.beta.dot(&u);
    let a = &inv.alpha_prime;
    // P += α'uᵀ + uα'ᵀ + c·α'α'ᵀ, written as two rank-one updates:
    // α'(u + c/2·α')ᵀ + (u + c/2·α')α'ᵀ.
    let w = &u + a * (0.5 * c);
    let n = p.nrows();
    if n > 0 {
        let (a, w) = (a.as_slice(), w.as_slice());
        for (j, col) in p.as_mut_slice().chunks_exact_mut(n).enumerate() {
            let (aj, wj) = (a[j], w[j]);
            for ((x, ai), wi) in col.iter_mut().zip(a).zip(w) {
                *x += ai * wj + wi * aj;
            }
        }
    }
    repair_psd(p);
}

/// Factored `T⁻¹ = T_F T_W T_I T_R = 𝕋(x̂⁺)⁻¹ 𝕋(x̂⁻)`, stored as the 3×3
/// blocks of its elementary row operations.
#[derive(Clone, Debug)]
pub struct IndirectTransform {
    pub layout: ErrorLayout,
    /// `R̂⁺ᵀ R̂⁻` on the current orientation rows.
    pub imu_rot: Mat3,
    /// `[p̂⁻ − p̂⁺]× R̂⁺` coupling the new orientation into position.
    pub imu_pos: Mat3,
    /// `[v̂⁻ − v̂⁺]× R̂⁺` coupling the new orientation into velocity.
    pub imu_vel: Mat3,
    /// Per clone: (`R̂ᵢ⁺ᵀ R̂ᵢ⁻`, `[p̂ᵢ⁻ − p̂ᵢ⁺]× R̂ᵢ⁺`).
    pub clones: Vec<(Mat3, Mat3)>,
    /// Per feature: `[p̂_f⁻ − p̂_f⁺]× R̂⁺`.
    pub features: Vec<Mat3>,
}

pub fn make_indirect(x_minus: &SwfState, x_plus: &SwfState) -> Result<IndirectTransform> {
    let layout = x_plus.layout();
    if x_minus.layout() != layout {
        return Err(SwfError::LayoutMismatch(format!("{:?} vs {:?}", x_minus.layout(), layout)));
    }
    let rp = *x_plus.imu.rot.matrix();
    let clones = x_minus
        .clones
        .iter()
        .zip(&x_plus.clones)
        .map(|(m, p)| {
            let rip = *p.rot.matrix();
            (rip.transpose() * m.rot.matrix(), skew(&(m.pos - p.pos)) * rip)
        })
        .collect();
    let features = x_minus
        .features
        .iter()
        .zip(&x_plus.features)
        .map(|(m, p)| skew(&(m.pos - p.pos)) * rp)
        .collect();
    Ok(IndirectTransform {
        layout,
        imu_rot: rp.transpose() * x_minus.imu.rot.matrix(),
        imu_pos: skew(&(x_minus.imu.pos - x_plus.imu.pos)) * rp,
        imu_vel: skew(&(x_minus.imu.vel - x_plus.imu.vel)) * rp,
        clones,
        features,
    })
}

fn rotate_block(v: &mut [f64], at: usize, a: &Mat3) {
    let b = a * Vec3::new(v[at], v[at + 1], v[at + 2]);
    v[at..at + 3].copy_from_slice(b.as_slice());
}

fn add_coupled(v: &mut [f64], dst: usize, src: usize, a: &Mat3) {
    let b = a * Vec3::new(v[src], v[src + 1], v[src + 2]);
    for k in 0..3 {
        v[dst + k] += b[k];
    }
}

fn rotate_cols(m: &mut DMatrix<f64>, col: usize, a: &Mat3) {
    let n = m.nrows();
    let (c0, rest) = m.as_mut_slice()[col * n..(col + 3) * n].split_at_mut(n);
    let (c1, c2) = rest.split_at_mut(n);
    for i in 0..n {
        let r = a * Vec3::new(c0[i], c1[i], c2[i]);
        c0[i] = r.x;
        c1[i] = r.y;
        c2[i] = r.z;
    }
}

/// Column block `dst` gains column block `src` times `aᵀ`; needs `src < dst`.
fn add_coupled_cols(m: &mut DMatrix<f64>, dst: usize, src: usize, a: &Mat3) {
    debug_assert!(src + 3 <= dst);
    let n = m.nrows();
    let (head, tail) = m.as_mut_slice().split_at_mut(dst * n);
    let s = &head[src * n..(src + 3) * n];
    let (s0, s1, s2) = (&s[..n], &s[n..2 * n], &s[2 * n..]);
    let (d0, rest) = tail[..3 * n].split_at_mut(n);
    let (d1, d2) = rest.split_at_mut(n);
    for i in 0..n {
        let r = a * Vec3::new(s0[i], s1[i], s2[i]);
        d0[i] += r.x;
        d1[i] += r.y;
        d2[i] += r.z;
    }
}

impl IndirectTransform {
    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    /// `v ← T⁻¹ v` as a sequence of block row operations.
    pub fn apply_vec(&self, v: &mut [f64]) {
        // T_R
        rotate_block(v, 0, &self.imu_rot);
        // T_I
        add_coupled(v, 3, 0, &self.imu_pos);
        add_coupled(v, 6, 0, &self.imu_vel);
        // T_W
        for (i, (rot, pos)) in self.clones.iter().enumerate() {
            let s = self.layout.clone_start(i);
            rotate_block(v, s, rot);
            add_coupled(v, s + 3, s, pos);
        }
        // T_F
        for (j, f) in self.features.iter().enumerate() {
            add_coupled(v, self.layout.feature_start(j), 0, f);
        }
    }

    /// `m ← T⁻¹ m`, one contiguous column at a time.
    pub fn apply_left(&self, m: &mut DMatrix<f64>) {
        let n = m.nrows();
        if n == 0 {
            return;
        }
        for col in m.as_mut_slice().chunks_exact_mut(n) {
            self.apply_vec(col);
        }
    }

    /// `m ← m T⁻ᵀ`, the same operations on contiguous column blocks.
    pub fn apply_right_transpose(&self, m: &mut DMatrix<f64>) {
        rotate_cols(m, 0, &self.imu_rot);
        add_coupled_cols(m, 3, 0, &self.imu_pos);
        add_coupled_cols(m, 6, 0, &self.imu_vel);
        for (i, (rot, pos)) in self.clones.iter().enumerate() {
            let s = self.layout.clone_start(i);
            rotate_cols(m, s, rot);
            add_coupled_cols(m, s + 3, s, pos);
        }
        for (j, f) in self.features.iter().enumerate() {
            add_coupled_cols(m, self.layout.feature_start(j), 0, f);
        }
    }

    pub fn dense_inverse(&self) -> DMatrix<f64> {
        let mut m = DMatrix::identity(self.dim(), self.dim());
        self.apply_left(&mut m);
        m
    }
}

/// `P ← T⁻¹ P T⁻ᵀ` for the factored transform.
pub fn apply_indirect(p: &mut DMatrix<f64>, t: &IndirectTransform) {
    // Both passes stream over contiguous memory in column-major storage.
    t.apply_left(p);
    t.apply_right_transpose(p);
    repair_psd(p);
}

/// Either alignment transform.
#[derive(Clone, Debug)]
pub enum Alignment {
    Direct(DirectInverse),
    Indirect(IndirectTransform),
}

impl Alignment {
    pub fn direct(x_minus: &SwfState, x_plus: &SwfState) -> Result<Self> {
        use crate::observability::build_basis;
        let t = make_direct(&build_basis(x_minus).n, &build_basis(x_plus).n)?;
        Ok(Alignment::Direct(invert_direct(&t)?))
    }

    pub fn indirect(x_minus: &SwfState, x_plus: &SwfState) -> Result<Self> {
        Ok(Alignment::Indirect(make_indirect(x_minus, x_plus)?))
    }

    pub fn apply_cov(&self, p: &mut DMatrix<f64>) {
        match self {
            Alignment::Direct(inv) => apply_direct_inverse(p, inv),
            Alignment::Indirect(t) => apply_indirect(p, t),
        }
    }

    pub fn apply_left(&self, m: &mut DMatrix<f64>) {
        match self {
            Alignment::Direct(inv) => inv.apply_left(m),
            Alignment::Indirect(t) => t.apply_left(m),
        }
    }

    /// Dense forward transform `T`; intended for small oracle checks.
    pub fn dense_forward(&self) -> DMatrix<f64> {
        let inv = match self {
            Alignment::Direct(inv) => inv.dense(),
            Alignment::Indirect(t) => t.dense_inverse(),
        };
        inv.try_inverse().expect("alignment transforms are invertible")
    }
}

/// Dense `𝕋(x̂⁺)⁻¹ 𝕋(x̂⁻)`, the reference for [`IndirectTransform`].
pub fn dense_indirect_inverse(x_minus: &SwfState, x_plus: &SwfState) -> DMatrix<f64> {
    let tp = build_aux(x_plus).try_inverse().expect("auxiliary matrix is invertible");
    tp * build_aux(x_minus)
}

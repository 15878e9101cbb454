use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{all_finite, check_shape, Observer, ObserverFamily};
use crate::combinatorics::SubsetIndex;
use crate::error::{Error, Result};
use crate::model::PlantModel;

/// `N`, `M` with `[L; C^J]^{-1} = [N M]`.
pub(crate) fn block_inverse(
    subset: &SubsetIndex,
    l: &DMatrix<f64>,
    c_j: &DMatrix<f64>,
    condition_cap: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = c_j.ncols();
    let nz = l.nrows();
    let fail = |reason: String| Error::Construction {
        subset: subset.to_string(),
        reason,
    };
    if l.ncols() != n || nz + c_j.nrows() != n {
        return Err(fail(format!(
            "[L; C^J] must be {n}x{n}, got {}x{}",
            nz + c_j.nrows(),
            l.ncols()
        )));
    }
    let mut t = DMatrix::zeros(n, n);
    t.rows_mut(0, nz).copy_from(l);
    t.rows_mut(nz, n - nz).copy_from(c_j);
    let sv = t.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 0.0) || smax / smin > condition_cap {
        return Err(fail(format!(
            "[L; C^J] is singular or ill-conditioned (condition number {:e})",
            smax / smin
        )));
    }
    let inv = t
        .try_inverse()
        .ok_or_else(|| fail("[L; C^J] is singular".into()))?;
    Ok((
        inv.columns(0, nz).into_owned(),
        inv.columns(nz, n - nz).into_owned(),
    ))
}

/// Reduced-order observer on `ζ = L x`, reconstructing `x = N ζ + M y^J`.
///
/// The update for step k+1 runs once `y^J(k+1)` is available:
/// `ζ+ = A_L ζ + L φ(ζ, y) + B_L y + K (y+ - C^J x̂⁻)` where
/// `x̂⁻ = F(N ζ + M y, u)` is the model prediction of the next state.
#[derive(Clone, Debug)]
pub struct ReducedOrderObserver {
    subset: SubsetIndex,
    plant: Arc<PlantModel>,
    l: DMatrix<f64>,
    c_j: DMatrix<f64>,
    n_mat: DMatrix<f64>,
    m_mat: DMatrix<f64>,
    a_l: DMatrix<f64>,
    b_l: DMatrix<f64>,
    a: DMatrix<f64>,
    k: DMatrix<f64>,
    z: DVector<f64>,
    buffer: Option<(DVector<f64>, DVector<f64>)>,
    diverged: bool,
}

pub fn build_reduced_observer(
    plant: Arc<PlantModel>,
    subset: SubsetIndex,
    l: DMatrix<f64>,
    k: DMatrix<f64>,
    condition_cap: f64,
) -> Result<ReducedOrderObserver> {
    let fail = |reason: &str| Error::Construction {
        subset: subset.to_string(),
        reason: reason.to_string(),
    };
    let sd = plant
        .structured_dynamics()
        .ok_or_else(|| fail("reduced-order observers need a plant with a linear part A"))?;
    let c_j = plant
        .output_rows_matrix(&subset)
        .ok_or_else(|| fail("reduced-order observers need linear outputs"))?;
    let n = plant.n;
    let nz = n
        .checked_sub(subset.card())
        .ok_or_else(|| fail("more measured rows than states"))?;
    check_shape(&subset, "L", (nz, n), &l)?;
    check_shape(&subset, "K", (nz, subset.card()), &k)?;
    let (n_mat, m_mat) = block_inverse(&subset, &l, &c_j, condition_cap)?;

    // reconstruction identity on random vectors
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..n {
        let x = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let back = &n_mat * (&l * &x) + &m_mat * (&c_j * &x);
        if (back - &x).norm() > 1e-8 * x.norm().max(1.0) {
            return Err(fail("N L + M C^J is not the identity"));
        }
    }

    let a = sd.a.clone();
    let a_l = &l * &a * &n_mat;
    let b_l = &l * &a * &m_mat;
    Ok(ReducedOrderObserver {
        subset,
        l,
        c_j,
        n_mat,
        m_mat,
        a_l,
        b_l,
        a,
        k,
        z: DVector::zeros(nz),
        buffer: None,
        diverged: false,
        plant,
    })
}

impl ReducedOrderObserver {
    pub fn n_matrix(&self) -> &DMatrix<f64> {
        &self.n_mat
    }

    pub fn m_matrix(&self) -> &DMatrix<f64> {
        &self.m_mat
    }

    pub fn l_matrix(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn c_matrix(&self) -> &DMatrix<f64> {
        &self.c_j
    }

    /// `N L + M C^J`, which should be the identity.
    pub fn reconstruction(&self) -> DMatrix<f64> {
        &self.n_mat * &self.l + &self.m_mat * &self.c_j
    }

    fn reconstruct(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.n_mat * &self.z + &self.m_mat * y
    }
}

impl Observer for ReducedOrderObserver {
    fn subset(&self) -> &SubsetIndex {
        &self.subset
    }

    fn family(&self) -> ObserverFamily {
        ObserverFamily::ReducedOrder
    }

    fn step(&mut self, y_j: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        if let Some((y_prev, u_prev)) = self.buffer.take() {
            let x_prev = self.reconstruct(&y_prev);
            // φ(ζ, y) = f(x) - A x, the part of F that is not linear
            let full = self.plant.drift(&x_prev, &u_prev);
            let phi = &full - &self.a * &x_prev;
            let z_pred = &self.a_l * &self.z + &self.l * phi + &self.b_l * &y_prev;
            self.z = z_pred + &self.k * (y_j - &self.c_j * full);
        }
        self.buffer = Some((y_j.clone(), u.clone()));
        if !all_finite(&self.z) {
            self.diverged = true;
        }
        self.reconstruct(y_j)
    }

    fn reset(&mut self, x_hat0: &DVector<f64>) {
        self.z = &self.l * x_hat0;
        self.buffer = None;
        self.diverged = !all_finite(&self.z);
    }

    fn internal_state(&self) -> &DVector<f64> {
        &self.z
    }

    fn is_diverged(&self) -> bool {
        self.diverged
    }

    fn boxed_clone(&self) -> Box<dyn Observer> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ScalarFn, StructuredDynamics};

    pub(crate) fn example2() -> PlantModel {
        let sd = StructuredDynamics {
            a: DMatrix::from_row_slice(
                4,
                4,
                &[
                    0.5, 0.0, 0.0, 0.0, 0.0, 0.8, 1.0, 0.0, 0.5, 0.1, 0.3, 0.0, 0.3, 1.0, 0.0, 0.5,
                ],
            ),
            g: DMatrix::from_row_slice(4, 1, &[0.0, 0.0, 0.0, -1.25]),
            h: DMatrix::from_row_slice(1, 4, &[0.0, 0.0, 0.0, 1.0]),
            channels: vec![ScalarFn::Tanh],
            offset: DVector::from_vec(vec![1.0, 0.0, 0.0, -0.6]),
        };
        let c = DMatrix::from_row_slice(
            3,
            4,
            &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        );
        PlantModel::structured(sd, c).unwrap()
    }

    fn e1() -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 4, &[1.0, 0.0, 0.0, 0.0])
    }

    #[test]
    fn full_sensor_set_gives_selector_columns() {
        let plant = Arc::new(example2());
        let j = SubsetIndex::full(3);
        let obs = build_reduced_observer(plant, j, e1(), DMatrix::zeros(1, 3), 1e12).unwrap();
        let n_expect = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(obs.n_matrix(), &n_expect);
        let m_expect = DMatrix::from_row_slice(
            4,
            3,
            &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        );
        assert_eq!(obs.m_matrix(), &m_expect);
        assert!((obs.reconstruction() - DMatrix::<f64>::identity(4, 4)).norm() < 1e-12);
    }

    #[test]
    fn dependent_l_is_rejected() {
        let plant = Arc::new(example2());
        let j = SubsetIndex::full(3);
        let l = DMatrix::from_row_slice(1, 4, &[0.0, 1.0, 1.0, 0.0]);
        match build_reduced_observer(plant, j, l, DMatrix::zeros(1, 3), 1e12) {
            Err(Error::Construction { subset, .. }) => assert_eq!(subset, "{1,2,3}"),
            other => panic!("expected construction error, got {other:?}"),
        }
    }

    #[test]
    fn exact_start_stays_exact() {
        let plant = Arc::new(example2());
        let j = SubsetIndex::new(vec![2, 3], 3).unwrap();
        let l = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let k = DMatrix::from_row_slice(2, 2, &[0.7404, -0.1788, 0.0558, 0.9778]);
        let mut obs = build_reduced_observer(plant.clone(), j.clone(), l, k, 1e12).unwrap();
        let mut x = DVector::from_vec(vec![0.2, -1.0, 0.4, 0.1]);
        obs.reset(&x);
        let u = DVector::zeros(0);
        for _ in 0..60 {
            let xh = obs.step(&plant.output_subset(&x, &j), &u);
            assert!((xh - &x).norm() < 1e-12);
            x = plant.drift(&x, &u);
        }
    }

    #[test]
    fn converges_from_wrong_start() {
        let plant = Arc::new(example2());
        let j = SubsetIndex::new(vec![3], 3).unwrap();
        let l = DMatrix::from_row_slice(
            3,
            4,
            &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        );
        let k = DMatrix::from_column_slice(3, 1, &[0.2812, 1.524, 0.622]);
        let mut obs = build_reduced_observer(plant.clone(), j.clone(), l, k, 1e12).unwrap();
        obs.reset(&DVector::zeros(4));
        let mut x = DVector::from_vec(vec![1.0, -1.0, 0.5, 2.0]);
        let u = DVector::zeros(0);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..200 {
            let e = (obs.step(&plant.output_subset(&x, &j), &u) - &x).norm();
            first.get_or_insert(e);
            last = e;
            x = plant.drift(&x, &u);
        }
        assert!(first.unwrap() > 0.5);
        assert!(last < 1e-8, "final error {last}");
    }
}

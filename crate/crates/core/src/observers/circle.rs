use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{all_finite, check_shape, Observer, ObserverFamily};
use crate::combinatorics::SubsetIndex;
use crate::error::{Error, Result};
use crate::model::PlantModel;

/// `x̂+ = A x̂ + G f(H x̂ + K (C^J x̂ - y^J)) + L (C^J x̂ - y^J) + ρ(u)`
///
/// `ρ(u)` collects the constant offset and `B u` of the plant.
#[derive(Clone, Debug)]
pub struct CircleCriterionObserver {
    subset: SubsetIndex,
    plant: Arc<PlantModel>,
    c_j: DMatrix<f64>,
    k: DMatrix<f64>,
    l: DMatrix<f64>,
    x_hat: DVector<f64>,
    diverged: bool,
}

impl CircleCriterionObserver {
    pub fn new(
        plant: Arc<PlantModel>,
        subset: SubsetIndex,
        k: DMatrix<f64>,
        l: DMatrix<f64>,
    ) -> Result<Self> {
        let not_structured = || Error::Construction {
            subset: subset.to_string(),
            reason: "circle-criterion observers need a plant of the form A x + G f(H x) with linear outputs".into(),
        };
        let sd = plant.structured_dynamics().ok_or_else(not_structured)?;
        let c_j = plant.output_rows_matrix(&subset).ok_or_else(not_structured)?;
        let r = sd.h.nrows();
        check_shape(&subset, "K", (r, subset.card()), &k)?;
        check_shape(&subset, "L", (plant.n, subset.card()), &l)?;
        let x_hat = DVector::zeros(plant.n);
        Ok(CircleCriterionObserver {
            subset,
            plant,
            c_j,
            k,
            l,
            x_hat,
            diverged: false,
        })
    }
}

impl Observer for CircleCriterionObserver {
    fn subset(&self) -> &SubsetIndex {
        &self.subset
    }

    fn family(&self) -> ObserverFamily {
        ObserverFamily::CircleCriterion
    }

    fn step(&mut self, y_j: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let out = self.x_hat.clone();
        let sd = self
            .plant
            .structured_dynamics()
            .expect("checked at construction");
        let resid = &self.c_j * &self.x_hat - y_j;
        let arg = &sd.h * &self.x_hat + &self.k * &resid;
        let fv = DVector::from_iterator(
            arg.len(),
            arg.iter().zip(&sd.channels).map(|(v, f)| f.eval(*v)),
        );
        let mut next = &sd.a * &self.x_hat + &sd.g * fv + &self.l * resid + &sd.offset;
        if self.plant.n_u > 0 {
            next += &self.plant.input_matrix * u;
        }
        self.x_hat = next;
        if !all_finite(&self.x_hat) {
            self.diverged = true;
        }
        out
    }

    fn reset(&mut self, x_hat0: &DVector<f64>) {
        self.x_hat = x_hat0.clone();
        self.diverged = !all_finite(x_hat0);
    }

    fn internal_state(&self) -> &DVector<f64> {
        &self.x_hat
    }

    fn is_diverged(&self) -> bool {
        self.diverged
    }

    fn boxed_clone(&self) -> Box<dyn Observer> {
        Box::new(self.clone())
    }
}

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{all_finite, check_shape, Observer, ObserverFamily};
use crate::combinatorics::SubsetIndex;
use crate::error::Result;
use crate::model::PlantModel;

/// Full-order observer `x̂+ = f(x̂) + K (y^J - h^J(x̂))`.
#[derive(Clone, Debug)]
pub struct LuenbergerObserver {
    subset: SubsetIndex,
    plant: Arc<PlantModel>,
    gain: DMatrix<f64>,
    x_hat: DVector<f64>,
    diverged: bool,
}

impl LuenbergerObserver {
    pub fn new(plant: Arc<PlantModel>, subset: SubsetIndex, gain: DMatrix<f64>) -> Result<Self> {
        check_shape(&subset, "K", (plant.n, subset.card()), &gain)?;
        let x_hat = DVector::zeros(plant.n);
        Ok(LuenbergerObserver {
            subset,
            plant,
            gain,
            x_hat,
            diverged: false,
        })
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }
}

impl Observer for LuenbergerObserver {
    fn subset(&self) -> &SubsetIndex {
        &self.subset
    }

    fn family(&self) -> ObserverFamily {
        ObserverFamily::Luenberger
    }

    fn step(&mut self, y_j: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let out = self.x_hat.clone();
        let innovation = y_j - self.plant.output_subset(&self.x_hat, &self.subset);
        self.x_hat = self.plant.drift(&self.x_hat, u) + &self.gain * innovation;
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

//! Cross-population fusion.
//!
//! The top individuals of every population contribute their fused
//! prediction vectors as columns of a second elastic-net fit. Member
//! snapshots are stored with abstractions expanded, so a built model
//! evaluates on raw feature rows without the registry.

use serde::{Deserialize, Serialize};

use crate::ahsam::AbstractionRegistry;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evolution::{Individual, Population};
use crate::exprtree::NoAbstractions;
use crate::linfit::{self, DesignMatrix, ElasticNet, LinearFit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub population: String,
    /// Immutable, fully expanded copy of the member individual.
    pub individual: Individual,
}

impl EnsembleMember {
    pub fn predict_row(&self, row: &[f64]) -> Result<f64> {
        self.individual.predict_row(row, &NoAbstractions)
    }

    pub fn predict(&self, data: &Dataset) -> Result<Vec<f64>> {
        self.individual.predict(data, &AbstractionRegistry::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub members: Vec<EnsembleMember>,
    /// One weight per member.
    pub fusion: LinearFit,
    pub train_rmse: f64,
    pub val_rmse: f64,
}

/// Fuse the `top_m` best individuals of each population.
pub fn build_ensemble(
    pops: &[Population],
    top_m: usize,
    train: &Dataset,
    val: &Dataset,
    registry: &AbstractionRegistry,
    net: &ElasticNet,
) -> Result<EnsembleModel> {
    if top_m == 0 {
        return Err(Error::Config("top_m must be at least 1".into()));
    }
    let mut members = Vec::new();
    for pop in pops {
        for &i in pop.ranking().iter().take(top_m) {
            members.push(EnsembleMember {
                population: pop.id.clone(),
                individual: pop.individuals[i].expanded(registry)?,
            });
        }
    }
    fuse(members, train, val, net)
}

/// Fit fusion weights for given members.
pub fn fuse(members: Vec<EnsembleMember>, train: &Dataset, val: &Dataset, net: &ElasticNet) -> Result<EnsembleModel> {
    if members.is_empty() {
        return Err(Error::Input("ensemble has no members".into()));
    }
    let columns = members
        .iter()
        .map(|m| m.predict(train))
        .collect::<Result<Vec<_>>>()?;
    let x = DesignMatrix::new(train.n(), columns)?;
    let fusion = net.fit(&x, train.target())?;
    let mut model = EnsembleModel {
        members,
        train_rmse: fusion.train_rmse,
        fusion,
        val_rmse: f64::NAN,
    };
    model.val_rmse = linfit::rmse(&model.predict(val)?, val.target())?;
    Ok(model)
}

/// Validation RMSE of the fused model.
pub fn ensemble_fitness(model: &EnsembleModel) -> f64 {
    model.val_rmse
}

impl EnsembleModel {
    /// Per-member prediction columns on `data`.
    pub fn member_predictions(&self, data: &Dataset) -> Result<Vec<Vec<f64>>> {
        self.members.iter().map(|m| m.predict(data)).collect()
    }

    pub fn predict(&self, data: &Dataset) -> Result<Vec<f64>> {
        let x = DesignMatrix::new(data.n(), self.member_predictions(data)?)?;
        linfit::predict(&self.fusion, &x)
    }

    pub fn predict_row(&self, row: &[f64]) -> Result<f64> {
        let outputs = self
            .members
            .iter()
            .map(|m| m.predict_row(row))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.fusion.predict_one(&outputs))
    }
}

/// Predictions for raw feature rows; each member reads only the columns its
/// genes reference.
pub fn predict_full(model: &EnsembleModel, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    rows.iter().map(|r| model.predict_row(r)).collect()
}

//! Trained networks as JSON. Parameters are stored in `f64` whatever the
//! training precision, which is exact for `f32`.

use fbsde::nn::{MlpSpec, ParameterSet};
use fbsde::problem::ProblemKind;
use fbsde::solver::NetworkStack;
use fbsde::{Precision, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkRecord {
    pub spec: MlpSpec,
    pub tensors: Vec<TensorRecord>,
}

impl NetworkRecord {
    fn from_params<T: Real>(p: &ParameterSet<T>) -> Self {
        let tensors = p
            .tensors
            .iter()
            .map(|t| TensorRecord { shape: t.shape().to_vec(), data: t.data().iter().map(|v| v.as_f64()).collect() })
            .collect();
        Self { spec: p.spec, tensors }
    }

    fn to_params(&self) -> Result<ParameterSet<f64>> {
        let tensors =
            self.tensors.iter().map(|t| Tensor::from_vec(&t.shape, t.data.clone())).collect::<Result<Vec<_>, _>>()?;
        let p = ParameterSet { spec: self.spec, tensors };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub problem: ProblemKind,
    pub steps: usize,
    pub horizon: f64,
    pub precision: Precision,
    pub seed: u64,
    pub config_hash: String,
    pub y0: NetworkRecord,
    pub z: Vec<NetworkRecord>,
}

impl Checkpoint {
    pub fn new<T: Real>(
        problem: ProblemKind,
        horizon: f64,
        precision: Precision,
        seed: u64,
        config_hash: String,
        stack: &NetworkStack<T>,
    ) -> Self {
        Self {
            problem,
            steps: stack.steps(),
            horizon,
            precision,
            seed,
            config_hash,
            y0: NetworkRecord::from_params(&stack.y0),
            z: stack.z.iter().map(NetworkRecord::from_params).collect(),
        }
    }

    pub fn to_stack(&self) -> Result<NetworkStack<f64>> {
        Ok(NetworkStack {
            y0: self.y0.to_params()?,
            z: self.z.iter().map(NetworkRecord::to_params).collect::<Result<_>>()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fbsde::problem::make_problem;

    #[test]
    fn f32_stack_round_trips_exactly() {
        let kind = ProblemKind::Example1;
        let prob = make_problem(kind, &kind.default_params()).unwrap();
        let stack = NetworkStack::<f32>::init(&prob, 3, 11).unwrap();
        let ck = Checkpoint::new(kind, 0.25, Precision::F32, 11, "abc".into(), &stack);
        let text = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_stack().unwrap(), stack.cast::<f64>());
    }

    #[test]
    fn corrupted_shapes_are_rejected() {
        let kind = ProblemKind::Example1;
        let prob = make_problem(kind, &kind.default_params()).unwrap();
        let stack = NetworkStack::<f64>::init(&prob, 1, 0).unwrap();
        let mut ck = Checkpoint::new(kind, 0.25, Precision::F64, 0, String::new(), &stack);
        ck.z[0].tensors[0].shape = vec![1, 1];
        assert!(ck.to_stack().is_err());
    }
}

//! Published reference models (pendulum and path-following vehicle) with
//! the controller values printed alongside them.

use crate::nn_model::NodeModel;
use crate::numerics::Mat;

/// A shipped model plus the printed synthesis results for it.
#[derive(Debug, Clone)]
pub struct ReferenceExample {
    pub name: &'static str,
    pub model: NodeModel,
    /// Input matrix the printed cancellation weights correspond to.
    pub g: Mat,
    /// Printed layer sector bounds `(α^i, β^i)`.
    pub printed_sector: Vec<(f64, f64)>,
    pub printed_s: Mat,
    pub printed_y: Mat,
    pub printed_h: Mat,
    pub printed_mu: f64,
    pub printed_radius: f64,
    pub initial_conditions: Vec<[f64; 2]>,
}

pub const EX1_JSON: &str = include_str!("../fixtures/ex1.json");
pub const EX2_JSON: &str = include_str!("../fixtures/ex2.json");

/// Slope lower bound consistent with the printed pendulum synthesis
/// coefficients (102850 and 453.5455).
pub const EX1_COEFFICIENT_ALPHA: f64 = 0.9956;

fn unit_input() -> Mat {
    Mat::from_column_slice(2, 1, &[0.0, 1.0])
}

/// Pendulum, one hidden layer of 5 neurons on `[-2, 2]²`.
pub fn ex1() -> ReferenceExample {
    ReferenceExample {
        name: "ex1",
        model: NodeModel::from_json(EX1_JSON).expect("shipped fixture parses"),
        g: unit_input(),
        printed_sector: vec![(0.9978, 1.0)],
        printed_s: Mat::from_row_slice(2, 2, &[0.4807, -0.2379, -0.2379, 1.0928]),
        printed_y: Mat::from_row_slice(1, 2, &[1.3799, -5.7854]),
        printed_h: Mat::from_row_slice(1, 2, &[0.2808, -5.2330]),
        printed_mu: 0.61168,
        printed_radius: 0.0239,
        initial_conditions: vec![[1.0, 1.0], [-1.0, -1.0], [-1.5, 1.5], [1.5, -1.5]],
    }
}

/// Path-following vehicle, two hidden layers of 5 neurons on `[-1, 1]²`.
pub fn ex2() -> ReferenceExample {
    ReferenceExample {
        name: "ex2",
        model: NodeModel::from_json(EX2_JSON).expect("shipped fixture parses"),
        g: unit_input(),
        printed_sector: vec![(0.9994, 1.0), (0.9999, 1.0)],
        printed_s: Mat::from_row_slice(2, 2, &[1.9914, -0.7703, -0.7703, 12.1027]),
        printed_y: Mat::from_row_slice(1, 2, &[-2.6214, -18.6585]),
        printed_h: Mat::from_row_slice(1, 2, &[-1.9610, -1.6665]),
        printed_mu: 8.0543e-15,
        printed_radius: 3.5567e-16,
        initial_conditions: vec![[0.8, 0.8], [-0.8, -0.8], [-0.5, 0.5], [0.5, -0.5]],
    }
}

pub fn by_name(name: &str) -> Option<ReferenceExample> {
    match name {
        "ex1" => Some(ex1()),
        "ex2" => Some(ex2()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_load_with_expected_shapes() {
        let e1 = ex1();
        assert_eq!(e1.model.net.dims(), &[2, 5, 2]);
        assert_eq!(e1.model.epsilon, Some(0.002302));
        assert_eq!(e1.model.net.weights()[0][(0, 0)], -0.0365);
        assert_eq!(e1.model.net.weights()[0][(0, 1)], 0.0100);
        let e2 = ex2();
        assert_eq!(e2.model.net.dims(), &[2, 5, 5, 2]);
        assert_eq!(e2.model.net.weights()[0][(4, 1)], -0.0124);
        assert_eq!(e2.model.net.output_bias()[1], -0.4621);
        assert!(by_name("ex3").is_none());
    }
}

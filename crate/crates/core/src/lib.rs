//! Parameter estimation for slow-fast stochastic systems from slow
//! observations, via a first-order approximation of the random slow manifold.
//!
//! The numerics are generic over the scalar type (`f32` or `f64`, see
//! [`Real`]); the aliases at the bottom fix `f64`, which every driver uses.

pub mod error;
pub mod estimate;
pub mod io;
pub mod linalg;
pub mod manifold;
pub mod model;
pub mod noise;
pub mod optim;
pub mod real;
pub mod reduced;

pub use error::{Error, Result};
pub use linalg::Mat;
pub use real::Real;

pub type Model = model::SlowFastModel<f64>;
pub type Example = model::ExampleModel<f64>;
pub type Grid = noise::TimeGrid<f64>;
pub type Noise = noise::NoisePath<f64>;
pub type Eta = noise::StationaryPath<f64>;
pub type Traj = model::Trajectory<f64>;
pub type Manifold = manifold::ManifoldApprox<f64>;
pub type ExampleSlowManifold = manifold::ExampleManifold<f64>;
pub type SlowTraj = reduced::SlowTrajectory<f64>;
pub type Observations = estimate::ObservationSet<f64>;
pub type Estimation = optim::EstimationResult<f64>;

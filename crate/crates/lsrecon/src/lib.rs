//! Watertight implicit surface reconstruction from unorganized point
//! clouds.
//!
//! A signed-distance level-set field is evolved on a graded adaptive
//! quadtree/octree grid with a semi-Lagrangian scheme, driven by the
//! gradient of the distance to the cloud and damped by a curvature
//! term. Local interpolation uses constrained least-squares P1 and
//! third-order CWENO reconstructions. The batch pipeline in
//! [`pipeline`] orchestrates several runs at increasing resolution and
//! exports the final surface as a polyline (2D) or triangle mesh (3D).

pub mod cloud;
pub mod error;
pub mod grid;
pub mod isosurface;
mod mc_tables;
pub mod pipeline;
pub mod propagation;
pub mod recon;
pub mod reinit;
pub mod shapes;
pub mod solver;

pub use cloud::{LeafBins, PointCloud};
pub use error::{CloudError, GridError, PipelineError, PropagationError, SolverError};
pub use grid::{Adjacency, Domain, Forest, NodeId};
pub use pipeline::{RunConfig, RunReport};
pub use recon::{LocalPolynomial, Operator};

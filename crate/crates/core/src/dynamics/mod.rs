//! Ground-truth dynamics: a spring-mesh simulator, closed-form oracle systems,
//! and normalized trajectories with their file format.

mod oracle;
mod spring;
mod trajectory;

pub use oracle::{oracle_state, OracleSystem};
pub use spring::{mesh_energy, simulate_spring_mesh, simulate_spring_mesh_raw, MeshState, SpringMeshSystem, MESH_CHANNELS};
pub use trajectory::{read_dyft, split_windows, write_dyft, Normalization, Trajectory, Window, TRAJECTORY_MAGIC, TRAJECTORY_VERSION};

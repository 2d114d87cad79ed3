//! Simulation, estimation and teleoperation core of a desk-scale bimanual
//! mobile manipulator.

pub mod config;
pub mod control;
pub mod kinematics;
pub mod marker;
pub mod plant;
pub mod pose;
pub mod session;
pub mod teleop;

//! Forward and inverse solvers for the coupled electro-thermal problem:
//! conductivity equation with Joule heating, the anisotropic heat equation
//! and the boundary maps they induce.

pub mod boundary;
pub mod cgo;
pub mod cli;
pub mod config;
pub mod elliptic;
pub mod error;
pub mod expr;
pub mod fem;
pub mod heat;
pub mod inverse;
pub mod io;
pub mod linalg;
pub mod mesh;
pub mod verify;

pub use error::{Error, Result};

//! Forward/backward execution of compiled schedules.

pub mod checkpoint;
pub mod exec;
pub mod optim;
pub mod params;

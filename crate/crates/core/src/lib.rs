pub mod linalg;
pub mod model;
pub mod metrics;
pub mod modes;
pub mod tasks;
pub mod trainer;
pub mod tvx;

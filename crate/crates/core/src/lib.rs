pub mod datasets;
pub mod model;
pub mod objectives;
pub mod tuning;
pub mod trainer;
pub mod scenarios;
pub mod experiment;

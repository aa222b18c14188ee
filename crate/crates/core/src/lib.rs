pub mod autodiff;
pub mod data;
pub mod model;
pub mod scorer;
pub mod trainer;

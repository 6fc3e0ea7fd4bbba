pub mod autodiff;
pub mod experiment;
pub mod nets;
pub mod perm;
pub mod pooling;
pub mod reference;
pub mod seed;
pub mod tasks;
pub mod training;
pub mod verify;

//! Forward-learning experience engine.

pub mod evaluators;
pub mod experience;
pub mod explorer;
pub mod gateway;
pub mod inheritance;
pub mod lexical;
pub mod records;
pub mod retrieval;
pub mod synthetic;
pub mod task;
pub mod templates;
pub mod trainer;
pub mod updater;

pub mod blocks;
pub mod boxes;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod params;
pub mod training;

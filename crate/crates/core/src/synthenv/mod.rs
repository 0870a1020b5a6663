//! Synthetic block-pushing world: episode generation, idle filtering,
//! augmentation, splitting and on-disk persistence.

pub mod augment;
pub mod dataset;
pub mod generate;
pub mod store;
pub mod world;

pub use augment::{augment, AugmentConfig, AugmentTrace};
pub use dataset::{filter_idle, split_dataset, Sample, Splits};
pub use generate::{generate_episode, goal_reached, Episode, Segment, TaskFamily};
pub use world::{
    observe, render, ActionChunk, Block, BoardState, Color, Image, Observation, Shape,
    BLOCK_RADIUS, DEFAULT_HORIZON, DEFAULT_IMAGE_SIZE, DELTA_MAX, EFFECTOR_RADIUS,
};

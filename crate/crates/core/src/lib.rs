#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod camera;
pub mod geometry;
pub mod render;
pub mod rotation;
pub mod synthbench;
pub mod track;
pub mod cost;
pub mod orientlib;
pub mod optimize;

#![allow(dead_code)]

use mcunet_core::unet::ModelParams;
use mcunet_core::{RngStream, Tensor};
use mcunet_triage::pipeline;

pub fn params() -> ModelParams {
    pipeline::initial_params(7).unwrap()
}

pub fn image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut r = RngStream::new(seed, 0);
    Tensor::from_fn(&[h, w], |_| r.uniform_f32()).unwrap()
}

pub fn mask(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut r = RngStream::new(seed, 1);
    Tensor::from_fn(&[h, w], |_| (r.uniform() < 0.3) as u8 as f32).unwrap()
}

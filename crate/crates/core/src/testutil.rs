//! Random fixtures shared by unit tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{exp_so3, Vec3};
use crate::state::{ClonePose, FeatureState, ImuState, SwfState};

pub fn rv(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
    Vec3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s))
}

pub fn random_imu(rng: &mut ChaCha8Rng) -> ImuState {
    ImuState {
        rot: exp_so3(&rv(rng, 2.0)),
        pos: rv(rng, 5.0),
        vel: rv(rng, 2.0),
        bg: rv(rng, 0.01),
        ba: rv(rng, 0.1),
    }
}

pub fn random_state(rng: &mut ChaCha8Rng, n: usize, m: usize) -> SwfState {
    let mut x = SwfState::new(0.0, random_imu(rng));
    for i in 0..n {
        x.clones.push(ClonePose {
            rot: exp_so3(&rv(rng, 2.0)),
            pos: rv(rng, 5.0),
            stamp: i as f64,
            first_rot: None,
            first_pos: None,
        });
    }
    for j in 0..m {
        x.features.push(FeatureState { id: j as u64, pos: rv(rng, 10.0), first_pos: None });
    }
    x
}

//! Shared problem generators for the integration tests.
#![allow(dead_code)]

use gbp_ba::camera::{project, Intrinsics, Pose};
use gbp_ba::dataset::{
    perturb, synthesize, KeyframeSpec, LandmarkInit, LandmarkSpec, MeasurementSpec, PerturbParams,
    ProblemSpec, SynthParams, Trajectory,
};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

/// Small fully connected (hence loopy) scene with 3–8 keyframes and 10–40 landmarks.
pub fn loopy_problem(seed: u64) -> ProblemSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = synthesize(&SynthParams {
        n_keyframes: rng.gen_range(3..=8),
        n_landmarks: rng.gen_range(10..=40),
        pixel_noise: 0.5,
        measurement_sigma: Some(1.0),
        seed,
        ..Default::default()
    })
    .expect("synthetic scene");
    perturb(
        &truth,
        &PerturbParams {
            keyframe_sigma: 0.05,
            landmark_init: LandmarkInit::Gaussian { sigma: 0.05 },
            seed: seed + 1000,
        },
    )
    .expect("perturbation")
}

/// Tree-structured problem: keyframes joined by a random spanning tree whose
/// edges are shared landmarks, plus leaf landmarks seen once. Returns the
/// problem and the diameter of the variable graph in hops.
pub fn tree_problem(seed: u64) -> (ProblemSpec, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nk = rng.gen_range(2..=7);
    let k = Intrinsics::default();
    let poses: Vec<Pose> = synthesize(&SynthParams {
        n_keyframes: nk,
        n_landmarks: 1,
        trajectory: Trajectory::Arc {
            radius: 1.0,
            span: 1.5,
        },
        pixel_noise: 0.0,
        seed,
        ..Default::default()
    })
    .expect("poses")
    .keyframes
    .into_iter()
    .map(|kf| kf.pose)
    .collect();
    let mut p = ProblemSpec::new(k);
    for (id, pose) in poses.iter().enumerate() {
        p.keyframes.push(KeyframeSpec {
            id,
            pose: *pose,
            ground_truth: None,
        });
    }
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut add_landmark = |p: &mut ProblemSpec, rng: &mut ChaCha8Rng, observers: &[usize]| {
        let x = Vector3::new(
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.15..0.15),
        );
        let id = p.landmarks.len();
        let init = x + Vector3::new(rng.gen_range(-0.02..0.02), 0.01, -0.01);
        p.landmarks.push(LandmarkSpec {
            id,
            position: init,
            ground_truth: None,
        });
        for &kf in observers {
            let mut z = project(&poses[kf], &x, &k).expect("visible");
            z.x += rng.gen_range(-1.0..1.0);
            z.y += rng.gen_range(-1.0..1.0);
            p.measurements.push(MeasurementSpec {
                keyframe: kf,
                landmark: id,
                pixel: z,
                sigma: 1.0,
                outlier: false,
            });
            edges.push((kf, nk + id));
        }
    };
    for child in 1..nk {
        let parent = rng.gen_range(0..child);
        add_landmark(&mut p, &mut rng, &[parent, child]);
    }
    for kf in 0..nk {
        for _ in 0..rng.gen_range(1..=3) {
            add_landmark(&mut p, &mut rng, &[kf]);
        }
    }
    let n = nk + p.landmarks.len();
    let mut adj = vec![Vec::new(); n];
    for (a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let diameter = (0..n).map(|s| eccentricity(&adj, s)).max().unwrap_or(0);
    (p, diameter)
}

fn eccentricity(adj: &[Vec<usize>], start: usize) -> usize {
    let mut dist = vec![usize::MAX; adj.len()];
    dist[start] = 0;
    let mut queue = VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist.into_iter().max().unwrap_or(0)
}

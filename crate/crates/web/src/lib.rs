//! Browser bindings: operator matrices and the weighting-bias comparison
//! for a chosen skeleton, and synthetic walkers with optional augmentation.
//!
//! The plain functions in [`demo`] carry the logic and are what the tests
//! exercise; the `#[wasm_bindgen]` wrappers only convert errors.

use wasm_bindgen::prelude::*;

pub mod demo {
    use heatgait::augment::{augment_pipeline, AugmentConfig};
    use heatgait::data::{Condition, PoseSequence};
    use heatgait::graph::{self, Hop, SkeletonGraph};
    use heatgait::model::{aggregation_operators, AggregationMode};
    use heatgait::{rng, synth};

    pub fn parse_graph(name: &str) -> Result<SkeletonGraph, String> {
        match name {
            "coco" => Ok(SkeletonGraph::coco()),
            _ => name
                .strip_prefix("path:")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| (2..=64).contains(&n))
                .map(SkeletonGraph::path)
                .ok_or_else(|| format!("unknown graph {name:?}")),
        }
    }

    pub fn edges(name: &str) -> Result<Vec<u32>, String> {
        let g = parse_graph(name)?;
        Ok(g.edges().iter().flat_map(|&(a, b)| [a as u32, b as u32]).collect())
    }

    /// Row-major hop distances; -1 where unreachable.
    pub fn hop_distances(name: &str) -> Result<Vec<i32>, String> {
        let g = parse_graph(name)?;
        let d = graph::hop_distances(&g);
        let n = g.num_vertices();
        Ok((0..n * n)
            .map(|i| match d.get(i / n, i % n) {
                Hop::Reachable(k) => k as i32,
                Hop::Unreachable => -1,
            })
            .collect())
    }

    /// The normalised operator for scale `k` (0 is the identity term),
    /// row-major.
    pub fn operator(name: &str, mode: &str, k: usize, max_scale: usize) -> Result<Vec<f64>, String> {
        let g = parse_graph(name)?;
        let mode = match mode {
            "hop" => AggregationMode::HopExtracted,
            "poly" => AggregationMode::Polynomial,
            m => return Err(format!("unknown mode {m:?}")),
        };
        if k > max_scale || max_scale == 0 || max_scale > 8 {
            return Err(format!("need 0 <= k <= max_scale <= 8, got k = {k}, max_scale = {max_scale}"));
        }
        Ok(aggregation_operators(&g, max_scale, mode)[k].as_slice().to_vec())
    }

    pub fn bias_report_json(name: &str, max_scale: usize) -> Result<String, String> {
        let g = parse_graph(name)?;
        if max_scale > 8 {
            return Err("max_scale above 8 is not supported here".into());
        }
        graph::bias_report(&g, max_scale).map(|r| r.to_json()).map_err(|e| e.to_string())
    }

    /// One synthetic walker as `[frame][joint][x, y, confidence]`, flattened.
    #[allow(clippy::too_many_arguments)]
    pub fn walker(
        subject_seed: u64,
        sequence_seed: u64,
        frames: usize,
        condition: &str,
        angle: u32,
        reverse: bool,
        mirror: bool,
        noise_sigma: f64,
    ) -> Result<Vec<f64>, String> {
        let condition = Condition::parse(condition).ok_or_else(|| format!("unknown condition {condition:?}"))?;
        if frames == 0 || frames > 1000 {
            return Err("frames must be in 1..=1000".into());
        }
        let params = synth::generate_subject(subject_seed);
        let mut r = rng::seeded(sequence_seed);
        let seq = synth::generate_sequence(&params, frames, condition, angle, &mut r);
        let cfg = AugmentConfig {
            enable_reverse: reverse,
            enable_mirror: mirror,
            noise_sigma,
            swap_lr_on_mirror: true,
            apply_probability: 1.0,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        let (seq, _) = augment_pipeline(&seq, &cfg, &mut r);
        Ok(flatten(&seq))
    }

    fn flatten(seq: &PoseSequence) -> Vec<f64> {
        seq.frames
            .iter()
            .flat_map(|f| f.keypoints.iter().flat_map(|k| [k.x, k.y, k.confidence]))
            .collect()
    }
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

/// Flattened `(a, b)` edge list.
#[wasm_bindgen]
pub fn skeleton_edges(graph: &str) -> Result<Vec<u32>, JsError> {
    demo::edges(graph).map_err(js)
}

#[wasm_bindgen]
pub fn hop_distances(graph: &str) -> Result<Vec<i32>, JsError> {
    demo::hop_distances(graph).map_err(js)
}

#[wasm_bindgen]
pub fn operator_matrix(graph: &str, mode: &str, k: usize, max_scale: usize) -> Result<Vec<f64>, JsError> {
    demo::operator(graph, mode, k, max_scale).map_err(js)
}

#[wasm_bindgen]
pub fn bias_report(graph: &str, max_scale: usize) -> Result<String, JsError> {
    demo::bias_report_json(graph, max_scale).map_err(js)
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn synth_walker(
    subject_seed: u32,
    sequence_seed: u32,
    frames: usize,
    condition: &str,
    angle: u32,
    reverse: bool,
    mirror: bool,
    noise_sigma: f64,
) -> Result<Vec<f64>, JsError> {
    demo::walker(
        u64::from(subject_seed),
        u64::from(sequence_seed),
        frames,
        condition,
        angle,
        reverse,
        mirror,
        noise_sigma,
    )
    .map_err(js)
}

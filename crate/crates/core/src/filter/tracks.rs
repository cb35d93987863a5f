use std::collections::BTreeSet;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::Filter;

/// Observations of one landmark that is not (yet) part of the state, keyed
/// by the stamp of the clone taken at each frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrack {
    pub id: u64,
    pub obs: Vec<(f64, Vector2<f64>)>,
}

impl FeatureTrack {
    pub fn new(id: u64) -> Self {
        FeatureTrack { id, obs: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

/// What to do with the observations of one frame.
#[derive(Debug, Default)]
pub(crate) struct FramePlan {
    pub msckf: Vec<FeatureTrack>,
    pub slam: Vec<(u64, Vector2<f64>)>,
    pub init: Vec<FeatureTrack>,
    pub lost_slam: Vec<u64>,
}

fn by_length(tracks: &mut [FeatureTrack]) {
    tracks.sort_by(|a, b| b.len().cmp(&a.len()).then(a.id.cmp(&b.id)));
}

impl Filter {
    /// Sorts the frame's observations into state-feature updates, MSCKF
    /// candidates and features ready to enter the state. Must run after the
    /// frame's clone has been added.
    pub(crate) fn plan_frame(&mut self, stamp: f64, obs: &[(u64, Vector2<f64>)]) -> FramePlan {
        let mut plan = FramePlan::default();
        let seen: BTreeSet<u64> = obs.iter().map(|(id, _)| *id).collect();
        for (id, uv) in obs {
            if self.est.x.feature_index(*id).is_some() {
                plan.slam.push((*id, *uv));
            } else {
                self.tracks.entry(*id).or_insert_with(|| FeatureTrack::new(*id)).obs.push((stamp, *uv));
            }
        }
        plan.lost_slam = self.est.x.features.iter().map(|f| f.id).filter(|id| !seen.contains(id)).collect();

        let lost: Vec<u64> = self
            .tracks
            .values()
            .filter(|t| t.obs.last().map_or(true, |(s, _)| *s != stamp))
            .map(|t| t.id)
            .collect();
        for id in lost {
            let t = self.tracks.remove(&id).expect("listed track");
            if self.cfg.mode.uses_msckf() && t.len() >= self.cfg.min_obs {
                plan.msckf.push(t);
            }
        }

        let window_full = self.est.x.clones.len() >= self.cfg.max_clones;
        let oldest = self.est.x.clones.first().map(|c| c.stamp);
        let mut active: Vec<FeatureTrack> = self.tracks.values().cloned().collect();
        by_length(&mut active);
        let mut capacity = self.cfg.max_slam_features.saturating_sub(self.est.x.features.len());
        let threshold = self.cfg.init_threshold();
        for t in active {
            if self.cfg.mode.uses_slam() && capacity > 0 && t.len() >= threshold {
                capacity -= 1;
                self.tracks.remove(&t.id);
                plan.init.push(t);
            } else if self.cfg.mode.uses_msckf()
                && window_full
                && t.len() >= self.cfg.min_obs
                && t.obs.first().map(|(s, _)| *s) == oldest
            {
                self.tracks.remove(&t.id);
                plan.msckf.push(t);
            }
        }
        by_length(&mut plan.msckf);
        plan
    }
}

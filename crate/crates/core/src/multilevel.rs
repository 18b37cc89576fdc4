//! Top-down fusion of the four backbone levels into a pyramid with a
//! uniform channel count.

use crate::backbone::FeatureSet;
use crate::error::{invalid, Result};
use crate::params::{ConvParams, ParamStore, Session};
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug)]
pub struct PyramidParams {
    /// 1×1 projections to `channels`, finest level first; the last one is
    /// the entry point of the coarsest level into the top-down path.
    pub lateral: [ConvParams; 4],
    /// 3×3 pad-1 convs applied after fusion.
    pub smooth: [ConvParams; 4],
}

impl PyramidParams {
    pub fn new(store: &mut ParamStore, in_channels: [usize; 4], channels: usize) -> Self {
        let lateral = std::array::from_fn(|i| {
            ConvParams::new(
                store,
                &format!("multilevel.lateral{}", i + 2),
                in_channels[i],
                channels,
                1,
                1,
                0,
            )
        });
        let smooth = std::array::from_fn(|i| {
            ConvParams::new(store, &format!("multilevel.smooth{}", i + 2), channels, channels, 3, 1, 1)
        });
        Self { lateral, smooth }
    }

    pub fn channels(&self, store: &ParamStore) -> usize {
        self.lateral[0].out_channels(store)
    }
}

/// 1×1 conv to the pyramid width.
pub fn lateral_project(s: &mut Session, c: Var, p: &ConvParams) -> Result<Var> {
    let expect = p.in_channels(s.store());
    let got = s.tape.shape(c).get(1).copied().unwrap_or(0);
    if got != expect {
        return Err(invalid!(
            "lateral projection expects {expect} input channels, got {got}"
        ));
    }
    s.conv(c, p)
}

/// `upsample(upper) + lateral`.
pub fn top_down_fuse(tape: &mut Tape, upper: Var, lateral: Var) -> Result<Var> {
    let up = tape.upsample_nearest2(upper)?;
    if tape.shape(up) != tape.shape(lateral) {
        return Err(invalid!(
            "upsampled shape {:?} does not match lateral shape {:?}",
            tape.shape(up),
            tape.shape(lateral)
        ));
    }
    tape.add(up, lateral)
}

pub fn build_pyramid(s: &mut Session, c: &FeatureSet, p: &PyramidParams) -> Result<FeatureSet> {
    let mut fused = [c.levels[3]; 4];
    fused[3] = lateral_project(s, c.levels[3], &p.lateral[3])?;
    for i in (0..3).rev() {
        let lat = lateral_project(s, c.levels[i], &p.lateral[i])?;
        fused[i] = top_down_fuse(&mut s.tape, fused[i + 1], lat)?;
    }
    smooth_all(s, fused, p)
}

/// The pyramid without top-down fusion: every level is projected and
/// smoothed independently.
pub fn project_levels(s: &mut Session, c: &FeatureSet, p: &PyramidParams) -> Result<FeatureSet> {
    let mut projected = c.levels;
    for i in 0..4 {
        projected[i] = lateral_project(s, c.levels[i], &p.lateral[i])?;
    }
    smooth_all(s, projected, p)
}

fn smooth_all(s: &mut Session, levels: [Var; 4], p: &PyramidParams) -> Result<FeatureSet> {
    let mut out = levels;
    for i in 0..4 {
        out[i] = s.conv(levels[i], &p.smooth[i])?;
    }
    Ok(FeatureSet { levels: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{grad_check_module, ParamKind, Phase};
    use crate::tensor::{GradChecker, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let kind = store.entry(id).kind;
            if kind == ParamKind::Weight || kind == ParamKind::Bias {
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = Tensor::randn(&shape, 0.0, 0.5, &mut rng);
            }
        }
    }

    fn features(s: &mut Session, chans: [usize; 4], side: usize, rng: &mut ChaCha8Rng) -> FeatureSet {
        let levels = std::array::from_fn(|i| {
            let h = side >> i;
            s.tape
                .constant(Tensor::randn(&[1, chans[i], h, h], 0.0, 1.0, rng))
        });
        FeatureSet { levels }
    }

    #[test]
    fn identity_lateral_projection() {
        let mut store = ParamStore::new();
        let p = ConvParams::new(&mut store, "l", 3, 3, 1, 1, 0);
        let w = store.get_mut(p.weight).data_mut();
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[1, 3, 4, 4], 0.0, 1.0, &mut rng);
        let mut s = Session::new(&store, Phase::Eval);
        let xv = s.tape.constant(x.clone());
        let y = lateral_project(&mut s, xv, &p).unwrap();
        assert_eq!(s.tape.value(y), &x);
    }

    #[test]
    fn lateral_shape_and_channel_mismatch() {
        let mut store = ParamStore::new();
        let p = ConvParams::new(&mut store, "l", 256, 128, 1, 1, 0);
        let mut s = Session::new(&store, Phase::Eval);
        let x = s.tape.constant(Tensor::zeros(&[1, 256, 20, 20]));
        let y = lateral_project(&mut s, x, &p).unwrap();
        assert_eq!(s.tape.shape(y), &[1, 128, 20, 20]);
        let bad = s.tape.constant(Tensor::zeros(&[1, 64, 20, 20]));
        assert!(lateral_project(&mut s, bad, &p).is_err());
    }

    #[test]
    fn fuse_examples() {
        let mut tape = Tape::new();
        let upper = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap());
        let lat = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = top_down_fuse(&mut tape, upper, lat).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0; 4]);

        let zero = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let y = top_down_fuse(&mut tape, upper, zero).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0; 4]);

        let a = tape.upsample_nearest2(upper).unwrap();
        let ab = tape.add(a, lat).unwrap();
        let ba = tape.add(lat, a).unwrap();
        assert_eq!(tape.value(ab), tape.value(ba));

        let wrong = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let err = top_down_fuse(&mut tape, upper, wrong).unwrap_err().to_string();
        assert!(err.contains("[1, 1, 2, 2]") && err.contains("[1, 1, 3, 3]"), "{err}");
    }

    #[test]
    fn zero_features_give_zero_pyramid() {
        let mut store = ParamStore::new();
        let p = PyramidParams::new(&mut store, [2, 3, 4, 5], 4);
        let ids: Vec<_> = store.ids().filter(|id| store.entry(*id).kind == ParamKind::Weight).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::randn(&shape, 0.0, 1.0, &mut rng);
        }
        let mut s = Session::new(&store, Phase::Eval);
        let levels = std::array::from_fn(|i| {
            s.tape.constant(Tensor::zeros(&[1, [2, 3, 4, 5][i], 16 >> i, 16 >> i]))
        });
        let out = build_pyramid(&mut s, &FeatureSet { levels }, &p).unwrap();
        for (i, v) in out.levels.iter().enumerate() {
            assert_eq!(s.tape.shape(*v), &[1, 4, 16 >> i, 16 >> i]);
            assert!(s.tape.value(*v).data().iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn information_flows_top_down_only() {
        let chans = [2, 3, 4, 5];
        let mut store = ParamStore::new();
        let p = PyramidParams::new(&mut store, chans, 3);
        randomize(&mut store, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base: Vec<Tensor> = (0..4)
            .map(|i| Tensor::randn(&[1, chans[i], 16 >> i, 16 >> i], 0.0, 1.0, &mut rng))
            .collect();
        let run = |inputs: &[Tensor]| -> Vec<Tensor> {
            let mut s = Session::new(&store, Phase::Eval);
            let levels = std::array::from_fn(|i| s.tape.constant(inputs[i].clone()));
            let out = build_pyramid(&mut s, &FeatureSet { levels }, &p).unwrap();
            out.levels.iter().map(|v| s.tape.value(*v).clone()).collect()
        };
        let reference = run(&base);
        for perturbed in 0..4 {
            let mut inputs = base.clone();
            inputs[perturbed].data_mut()[0] += 1.0;
            let out = run(&inputs);
            for level in 0..4 {
                assert_eq!(
                    out[level] != reference[level],
                    level <= perturbed,
                    "perturbing level {perturbed} vs output level {level}"
                );
            }
        }
    }

    #[test]
    fn project_levels_keeps_levels_independent() {
        let chans = [2, 3, 4, 5];
        let mut store = ParamStore::new();
        let p = PyramidParams::new(&mut store, chans, 3);
        randomize(&mut store, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = Session::new(&store, Phase::Eval);
        let c = features(&mut s, chans, 16, &mut rng);
        let out = project_levels(&mut s, &c, &p).unwrap();
        let single = s.conv(c.levels[3], &p.lateral[3]).unwrap();
        let single = s.conv(single, &p.smooth[3]).unwrap();
        assert_eq!(s.tape.value(out.levels[3]), s.tape.value(single));
    }

    #[test]
    fn pyramid_passes_grad_check() {
        let chans = [2, 3, 4, 5];
        let mut store = ParamStore::new();
        let p = PyramidParams::new(&mut store, chans, 3);
        randomize(&mut store, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // C-levels of a 32×32 image
        let inputs: Vec<Tensor> = (0..4)
            .map(|i| Tensor::randn(&[1, chans[i], 8 >> i, 8 >> i], 0.0, 1.0, &mut rng))
            .collect();
        let checker = GradChecker::new(1e-5).max_elements(10);
        let report = grad_check_module(&store, Phase::Eval, &inputs, &checker, |s, x| {
            let out = build_pyramid(s, &FeatureSet { levels: [x[0], x[1], x[2], x[3]] }, &p)?;
            let flat: Vec<Var> = out
                .levels
                .iter()
                .map(|v| {
                    let n = s.tape.value(*v).numel();
                    s.tape.reshape(*v, &[n])
                })
                .collect::<Result<_>>()?;
            s.tape.concat(&flat)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}

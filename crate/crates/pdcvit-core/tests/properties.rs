//! Property tests for the algebraic invariants the rewrite relies on.

use proptest::prelude::*;

use pdcvit_core::pdc::{PairKind, PdcKernel, PixelPairSet};
use pdcvit_core::rng::{seeded, uniform};
use pdcvit_core::{GradTape, Tensor};

fn tensor_strategy(shape: &'static [usize], lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let numel: usize = shape.iter().product();
    proptest::collection::vec(lo..hi, numel)
        .prop_map(move |data| Tensor::from_vec(shape, data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // The paper's central identity: direct pair-wise PDC equals vanilla
    // convolution with the scattered weights, for both variants and any
    // stride/padding combination.
    #[test]
    fn pdc_direct_equals_converted(
        input in tensor_strategy(&[2, 8, 8], -1.0, 1.0),
        weights in tensor_strategy(&[2, 2, 8], -1.0, 1.0),
        angular in any::<bool>(),
        stride in 1usize..3,
        padding in 0usize..3,
    ) {
        let kind = if angular { PairKind::Angular } else { PairKind::Radial };
        let kernel = PdcKernel::new(PixelPairSet::for_kind(kind), weights).unwrap();
        let a = kernel.forward_direct(&input, stride, padding).unwrap();
        let b = kernel.forward_converted(&input, stride, padding).unwrap();
        let diff = a.max_abs_diff(&b).unwrap();
        prop_assert!(diff < 1e-10, "max diff {diff}");
    }

    // Constant inputs produce exactly zero through the direct path.
    #[test]
    fn pdc_annihilates_constants(
        c in -10.0f64..10.0,
        weights in tensor_strategy(&[1, 1, 8], -1.0, 1.0),
        angular in any::<bool>(),
        padding in 0usize..3,
    ) {
        let kind = if angular { PairKind::Angular } else { PairKind::Radial };
        let kernel = PdcKernel::new(PixelPairSet::for_kind(kind), weights).unwrap();
        let input = Tensor::full(&[1, 7, 7], c);
        let out = kernel.forward_direct(&input, 1, padding).unwrap();
        prop_assert!(out.data().iter().all(|v| *v == 0.0));
    }

    // Converted kernels have zero-sum slices (up to accumulation slack).
    #[test]
    fn converted_kernel_slices_sum_to_zero(
        weights in tensor_strategy(&[3, 2, 8], -1.0, 1.0),
        angular in any::<bool>(),
    ) {
        let kind = if angular { PairKind::Angular } else { PairKind::Radial };
        let ps = PixelPairSet::for_kind(kind);
        let k = ps.kernel_size();
        let kernel = PdcKernel::new(ps, weights).unwrap();
        let conv = kernel.convert();
        for slice in conv.weights.data().chunks(k * k) {
            let s: f64 = slice.iter().sum();
            prop_assert!(s.abs() <= 1e-14, "slice sum {s}");
        }
    }

    // Softmax rows sum to one and are invariant under constant shifts.
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        x in tensor_strategy(&[3, 5], -30.0, 30.0),
        shift in -100.0f64..100.0,
    ) {
        let mut tape = GradTape::inference();
        let mut shifted = x.clone();
        for v in shifted.data_mut() { *v += shift; }
        let a = tape.input(x);
        let b = tape.input(shifted);
        let sa = tape.softmax(a, 1).unwrap();
        let sb = tape.softmax(b, 1).unwrap();
        for row in tape.value(sa).data().chunks(5) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12, "row sum {s}");
        }
        let diff = tape.value(sa).max_abs_diff(tape.value(sb)).unwrap();
        prop_assert!(diff <= 1e-12, "shift drift {diff}");
    }

    // Convolution distributes over kernel addition (linearity in weights).
    #[test]
    fn conv_linear_in_kernel(
        input in tensor_strategy(&[1, 6, 6], -1.0, 1.0),
        k1 in tensor_strategy(&[2, 1, 3, 3], -1.0, 1.0),
        k2 in tensor_strategy(&[2, 1, 3, 3], -1.0, 1.0),
    ) {
        let mut tape = GradTape::inference();
        let sum: Vec<f64> = k1.data().iter().zip(k2.data()).map(|(a, b)| a + b).collect();
        let x = tape.input(input);
        let k1 = tape.input(k1);
        let k2 = tape.input(k2);
        let ks = tape.input(Tensor::from_vec(&[2, 1, 3, 3], sum).unwrap());
        let o1 = tape.conv2d(x, k1, 1, 1).unwrap();
        let o2 = tape.conv2d(x, k2, 1, 1).unwrap();
        let os = tape.conv2d(x, ks, 1, 1).unwrap();
        let both = tape.add(o1, o2).unwrap();
        let diff = tape.value(os).max_abs_diff(tape.value(both)).unwrap();
        prop_assert!(diff < 1e-10, "linearity violated by {diff}");
    }

    // Patchify is a bijection: gradients of sum(patchify(x)) are all ones,
    // i.e. every input cell is used exactly once.
    #[test]
    fn patchify_uses_every_cell_once(
        x in tensor_strategy(&[2, 4, 4], -1.0, 1.0),
        p in prop::sample::select(vec![1usize, 2, 4]),
    ) {
        let mut tape = GradTape::recording();
        let xv = tape.param(&x);
        let patches = tape.patchify(xv, p).unwrap();
        let loss = tape.sum_all(patches).unwrap();
        tape.backward(loss).unwrap();
        prop_assert!(tape.grad(xv).unwrap().iter().all(|g| *g == 1.0));
    }
}

// A thousand fixed-seed trials of the equivalence identity per variant; the
// acceptance suite repeats this through the CLI-facing verify path.
#[test]
fn equivalence_thousand_trials_both_variants() {
    for kind in [PairKind::Angular, PairKind::Radial] {
        let mut rng = seeded(0xE0_u64 + kind as u64);
        let mut max_diff = 0.0f64;
        for trial in 0..1000 {
            let cin = 1 + trial % 3;
            let cout = 1 + (trial / 3) % 3;
            let size = 6 + trial % 5;
            let stride = 1 + trial % 2;
            let padding = trial % 3;
            let input = uniform(&[cin, size, size], -1.0, 1.0, &mut rng);
            let weights = uniform(&[cout, cin, 8], -1.0, 1.0, &mut rng);
            let kernel = PdcKernel::new(PixelPairSet::for_kind(kind), weights).unwrap();
            let a = kernel.forward_direct(&input, stride, padding).unwrap();
            let b = kernel.forward_converted(&input, stride, padding).unwrap();
            max_diff = max_diff.max(a.max_abs_diff(&b).unwrap());
        }
        assert!(max_diff < 1e-10, "{kind:?}: max diff over 1000 trials {max_diff}");
    }
}

use hbnn_cli::formats::{read_hbt, read_raw, write_hbt, write_raw};
use hbnn_core::binarize::{hetero_binarize, BitMask};
use hbnn_core::Tensor;
use proptest::prelude::*;

fn tensor_and_mask() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (1usize..200).prop_flat_map(|n| {
        (
            prop::collection::vec(-4.0f64..4.0, n),
            prop::collection::vec(1u8..=hbnn_core::MAX_BITS, n),
        )
    })
}

proptest! {
    #[test]
    fn hbt_bytes_are_stable((values, widths) in tensor_and_mask()) {
        let n = values.len();
        let h = hetero_binarize(&Tensor::from_vec(values), &BitMask::new(vec![n], widths.clone()).unwrap()).unwrap();
        let mut first = Vec::new();
        write_hbt(&mut first, &h).unwrap();
        let back = read_hbt(&mut first.as_slice()).unwrap();
        prop_assert_eq!(back.mask().widths(), widths.as_slice());
        let mut second = Vec::new();
        write_hbt(&mut second, &back).unwrap();
        prop_assert_eq!(&first, &second);
        // scales are stored as f32
        for (a, b) in h.reconstruct().data().iter().zip(back.reconstruct().data()) {
            prop_assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn raw_round_trip(values in prop::collection::vec(-1e3f32..1e3, 1..300)) {
        let n = values.len();
        let t = Tensor::new(vec![n], values.iter().map(|&v| v as f64).collect()).unwrap();
        let mut buf = Vec::new();
        write_raw(&mut buf, &t).unwrap();
        prop_assert_eq!(read_raw(&mut buf.as_slice()).unwrap(), t);
    }
}

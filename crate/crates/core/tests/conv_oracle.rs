use bsgd::autodiff::Tape;
use bsgd::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct seven-loop cross-correlation with zero padding.
fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &[f64], pad: usize) -> Tensor<f64> {
    let (n, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, ks) = (k.shape()[0], k.shape()[2]);
    let (oh, ow) = (h + 2 * pad + 1 - ks, w + 2 * pad + 1 - ks);
    let mut out = vec![0.0; n * c_out * oh * ow];
    for bi in 0..n {
        for co in 0..c_out {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..c_in {
                        for di in 0..ks {
                            for dj in 0..ks {
                                let (yi, xj) = ((i + di) as isize - pad as isize, (j + dj) as isize - pad as isize);
                                if yi < 0 || xj < 0 || yi >= h as isize || xj >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * c_in + ci) * h + yi as usize) * w + xj as usize];
                                let kv = k.data()[((co * c_in + ci) * ks + di) * ks + dj];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((bi * c_out + co) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, c_out, oh, ow], out).unwrap()
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..40 {
        let n = rng.random_range(1..=2);
        let c_in = rng.random_range(1..=3);
        let c_out = rng.random_range(1..=4);
        let ks = [1, 3, 5][trial % 3];
        let pad = rng.random_range(0..=ks / 2);
        let h = rng.random_range(ks..=ks + 4);
        let w = rng.random_range(ks..=ks + 4);
        let x = Tensor::from_fn(&[n, c_in, h, w], |_| rng.random::<f64>() - 0.5);
        let k = Tensor::from_fn(&[c_out, c_in, ks, ks], |_| rng.random::<f64>() - 0.5);
        let b: Vec<f64> = (0..c_out).map(|_| rng.random::<f64>()).collect();

        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(x.clone()).unwrap(), tape.param(k.clone()).unwrap());
        let bv = tape.param(Tensor::new(vec![c_out], b.clone()).unwrap()).unwrap();
        let y = tape.conv2d(xv, kv, bv, pad).unwrap();
        let expected = naive_conv(&x, &k, &b, pad);
        assert_eq!(tape.value(y).shape(), expected.shape());
        let diff = tape.value(y).zip_map(&expected, |a, e| a - e).unwrap().max_abs();
        assert!(diff < 1e-12, "trial {trial}: {diff}");
    }
}

#[test]
fn conv2d_rejects_mismatched_channels() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
    let k = tape.param(Tensor::zeros(&[3, 1, 3, 3])).unwrap();
    let b = tape.param(Tensor::zeros(&[3])).unwrap();
    assert!(tape.conv2d(x, k, b, 1).is_err());
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::op_grad_err;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(data: &[f32], shape: &[usize]) -> Tensor {
    Tensor::new(data.to_vec(), shape).unwrap()
}

#[test]
fn matmul_identity_and_hand_case() {
    let id = t(&[1., 0., 0., 1.], &[2, 2]);
    let m = t(&[1., 2., 3., 4.], &[2, 2]);
    assert_eq!(id.matmul(&m).unwrap().data(), m.data());
    let r = t(&[1., 2.], &[1, 2]).matmul(&t(&[3., 4.], &[2, 1])).unwrap();
    assert_eq!(r.shape(), &[1, 1]);
    assert_eq!(r.data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let err = Tensor::zeros(&[3, 4]).matmul(&Tensor::zeros(&[3, 2])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[3, 4]") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn matmul_grads_match_finite_differences() {
    let mut r = rng(1);
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4, 2], 1.0, &mut r);
    let ea = op_grad_err(|x| x.matmul(&b), &a, 1e-3, 7).unwrap();
    let eb = op_grad_err(|x| a.matmul(x), &b, 1e-3, 7).unwrap();
    assert!(ea < 1e-3 && eb < 1e-3, "{ea} {eb}");
}

#[test]
fn matmul_broadcasts_leading_dims() {
    let mut r = rng(2);
    let a = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
    let w = Tensor::randn(&[4, 5], 1.0, &mut r);
    let y = a.matmul(&w).unwrap();
    assert_eq!(y.shape(), &[2, 3, 5]);
    let second = a.narrow(0, 1, 1).unwrap().reshape(&[3, 4]).unwrap().matmul(&w).unwrap();
    assert_eq!(&y.data()[15..], second.data());
    let e = op_grad_err(|x| a.matmul(x), &w, 1e-3, 3).unwrap();
    assert!(e < 1e-3, "{e}");
}

#[test]
fn softmax_cases() {
    let y = t(&[0., 0., 0.], &[3]).softmax(0).unwrap();
    for v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
    }
    let y = t(&[1000., 0.], &[2]).softmax(0).unwrap();
    assert_eq!(y.data(), &[1.0, 0.0]);

    let x = Tensor::randn(&[3, 5], 2.0, &mut rng(3));
    for axis in 0..2 {
        let e = op_grad_err(|v| v.softmax(axis), &x, 1e-3, 4).unwrap();
        assert!(e < 1e-2, "axis {axis}: {e}");
    }
}

#[test]
fn layer_norm_cases() {
    assert_eq!(t(&[1., 1., 1.], &[3]).layer_norm(1e-5).unwrap().data(), &[0., 0., 0.]);
    let y = t(&[1., -1.], &[2]).layer_norm(1e-5).unwrap();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((y.data()[0] as f64 - expect).abs() < 1e-7);
    assert!((y.data()[1] as f64 + expect).abs() < 1e-7);

    let x = Tensor::randn(&[2, 8], 3.0, &mut rng(5));
    let y = x.layer_norm(1e-5).unwrap();
    for row in y.data().chunks(8) {
        let mu = row.iter().map(|v| *v as f64).sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (*v as f64 - mu).powi(2)).sum::<f64>() / 8.0;
        assert!(mu.abs() < 1e-6);
        assert!((var.sqrt() - 1.0).abs() < 1e-4);
    }
    let e = op_grad_err(|v| v.layer_norm(1e-5), &x, 1e-3, 6).unwrap();
    assert!(e < 1e-2, "{e}");
}

#[test]
fn activations() {
    assert_eq!(t(&[0.0], &[1]).silu().data(), &[0.0]);
    let x = Tensor::randn(&[10], 1.5, &mut rng(8));
    let e = op_grad_err(|v| Ok(v.gelu()), &x, 1e-3, 9).unwrap();
    assert!(e < 1e-2, "gelu {e}");
    let e = op_grad_err(|v| Ok(v.silu()), &x, 1e-3, 9).unwrap();
    assert!(e < 1e-2, "silu {e}");
}

#[test]
fn interp_nearest_duplicates_on_integer_ratio() {
    let x = t(&[1., 2.], &[2]);
    assert_eq!(x.interp_nearest(4, 0).unwrap().data(), &[1., 1., 2., 2.]);
    assert!(x.interp_nearest(0, 0).is_err());
    assert!(x.interp_nearest(3, 1).is_err());
}

#[test]
fn backward_simple_cases() {
    let p = Tensor::parameter(vec![1., 2.], &[2]).unwrap();
    p.sum().backward().unwrap();
    assert_eq!(p.grad().unwrap(), vec![1., 1.]);

    let p = Tensor::parameter(vec![1., 2.], &[2]).unwrap();
    p.mul(&p).unwrap().sum().backward().unwrap();
    assert_eq!(p.grad().unwrap(), vec![2., 4.]);

    // shared subexpression: d(x + x)/dx = 2
    let x = Tensor::parameter(vec![3.0], &[1]).unwrap();
    x.add(&x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0]);
}

#[test]
fn backward_accumulates_and_rejects_non_scalar() {
    let p = Tensor::parameter(vec![1., 2.], &[2]).unwrap();
    p.sum().backward().unwrap();
    p.sum().backward().unwrap();
    assert_eq!(p.grad().unwrap(), vec![2., 2.]);
    p.zero_grad();
    assert!(p.grad().is_none());
    assert!(matches!(p.scale(2.0).backward(), Err(Error::NonScalarLoss(_))));
}

#[test]
fn diamond_graph_visits_each_node_once() {
    // y = a*b + a, a = 2x: dy/dx = 2(b + 1)
    let x = Tensor::parameter(vec![1.5], &[1]).unwrap();
    let b = t(&[4.0], &[1]);
    let a = x.scale(2.0);
    let y = a.mul(&b).unwrap().add(&a).unwrap();
    y.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![10.0]);
}

#[test]
fn broadcast_binary_grads() {
    let mut r = rng(11);
    let a = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[3, 1], 1.0, &mut r).add_scalar(3.0);
    for (i, f) in [
        |a: &Tensor, b: &Tensor| a.add(b),
        |a: &Tensor, b: &Tensor| a.sub(b),
        |a: &Tensor, b: &Tensor| a.mul(b),
        |a: &Tensor, b: &Tensor| a.div(b),
    ]
    .into_iter()
    .enumerate()
    {
        let ea = op_grad_err(|x| f(x, &b), &a, 1e-3, 12).unwrap();
        let eb = op_grad_err(|x| f(&a, x), &b, 1e-3, 12).unwrap();
        assert!(ea < 1e-2 && eb < 1e-2, "op {i}: {ea} {eb}");
    }
    assert!(a.add(&Tensor::zeros(&[5])).is_err());
}

#[test]
fn shape_op_grads() {
    let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng(13));
    let cases: Vec<Box<dyn Fn(&Tensor) -> Result<Tensor>>> = vec![
        Box::new(|v| v.permute(&[2, 0, 1])),
        Box::new(|v| v.transpose(1, 2)),
        Box::new(|v| v.reshape(&[6, 4])),
        Box::new(|v| v.narrow(1, 1, 2)),
        Box::new(|v| v.index_select(1, &[2, 0, 0, 1])),
        Box::new(|v| v.sum_axis(1, false)),
        Box::new(|v| v.mean_axis(2, true)),
        Box::new(|v| Tensor::concat(&[v.clone(), v.scale(2.0)], 1)),
        Box::new(|v| Ok(v.add_scalar(1.0).sqrt())),
    ];
    let x = x.mul(&x).unwrap(); // positive for sqrt
    for (i, f) in cases.iter().enumerate() {
        let e = op_grad_err(|v| f(v), &x, 1e-3, 14).unwrap();
        assert!(e < 1e-2, "case {i}: {e}");
    }
}

#[test]
fn permute_matches_manual_transpose() {
    let x = t(&[1., 2., 3., 4., 5., 6.], &[2, 3]);
    let y = x.transpose(0, 1).unwrap();
    assert_eq!(y.shape(), &[3, 2]);
    assert_eq!(y.data(), &[1., 4., 2., 5., 3., 6.]);
}

#[test]
fn no_grad_records_nothing() {
    let p = Tensor::parameter(vec![1.0], &[1]).unwrap();
    let y = no_grad(|| p.scale(3.0));
    assert!(!y.requires_grad() && y.is_leaf());
    assert!(p.scale(3.0).requires_grad());
}

#[test]
fn ops_are_deterministic() {
    let mut r = rng(21);
    let a = Tensor::randn(&[4, 16], 1.0, &mut r);
    let b = Tensor::randn(&[16, 8], 1.0, &mut r);
    let f = || a.matmul(&b).unwrap().softmax(1).unwrap().layer_norm(1e-5).unwrap().to_vec();
    let (x, y) = (f(), f());
    assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn adamw_cases() {
    let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };

    let mut p = vec![1.0, -2.0];
    let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
    adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &cfg);
    assert_eq!(p, vec![1.0, -2.0]);

    let mut p = vec![0.5];
    let (mut m, mut v) = (vec![0.0], vec![0.0]);
    adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, &cfg);
    assert!((p[0] - 0.4).abs() < 1e-6, "{}", p[0]);

    let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.01, ..Default::default() };
    let mut p = vec![2.0];
    let (mut m, mut v) = (vec![0.0], vec![0.0]);
    adamw_update(&mut p, &[0.0], &mut m, &mut v, 1, &cfg);
    assert!((p[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-7);
}

#[test]
fn adamw_rejects_non_finite_grad() {
    let mut store = ParamStore::new();
    let id = store.insert("w", vec![1.0, 2.0], &[2]).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default(), &store);
    store.get(id).scale(f32::NAN).sum().backward().unwrap();
    assert!(matches!(opt.step(&mut store), Err(Error::NonFinite(_))));
    assert_eq!(store.get(id).data(), &[1.0, 2.0]);
    assert_eq!(opt.steps_taken(), 0);
}

#[test]
fn container_round_trip_and_order() {
    let mut store = ParamStore::new();
    store.insert("z.w", vec![1.0, 2.0, 3.0], &[3]).unwrap();
    store.insert("a.b", vec![4.0], &[]).unwrap();
    let mut buf = Vec::new();
    store.save(&mut buf).unwrap();
    assert_eq!(&buf[..4], b"HVFW");
    assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
    // first entry is the lexicographically smallest name
    assert_eq!(u16::from_le_bytes(buf[12..14].try_into().unwrap()), 3);
    assert_eq!(&buf[14..17], b"a.b");
    assert_eq!(buf[17], 0);

    let mut other = ParamStore::new();
    other.insert("z.w", vec![0.0; 3], &[3]).unwrap();
    other.insert("a.b", vec![0.0], &[]).unwrap();
    other.load(buf.as_slice()).unwrap();
    assert_eq!(other.get(other.id("z.w").unwrap()).data(), &[1.0, 2.0, 3.0]);

    assert!(read_container(&buf[..buf.len() - 1]).is_err());
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_container(bad.as_slice()).is_err());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn container_round_trips(entries in proptest::collection::btree_map(
            "[a-z.]{1,12}",
            proptest::collection::vec(-1e6f32..1e6, 0..20),
            0..6,
        )) {
            let entries: Vec<ContainerEntry> = entries
                .into_iter()
                .map(|(name, data)| ContainerEntry { name, shape: vec![data.len()], data })
                .collect();
            let mut buf = Vec::new();
            write_container(&mut buf, &entries).unwrap();
            prop_assert_eq!(read_container(buf.as_slice()).unwrap(), entries);
        }

        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-50f32..50.0, 1..16)) {
            let n = v.len();
            let y = Tensor::new(v, &[n]).unwrap().softmax(0).unwrap();
            let s: f32 = y.data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }
}

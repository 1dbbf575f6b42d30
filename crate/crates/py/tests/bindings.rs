use duometa_py::{exp_quadratic_grad_hvp, PyConfig, PyLabelMap, PyTensor};

#[test]
fn tensor_round_trips_through_dtns_bytes() {
    let t = PyTensor::new(vec![1.0, -2.5, 3.0, 0.0, 7.0, 8.0], vec![2, 3]).unwrap();
    let back = PyTensor::from_bytes(t.to_bytes()).unwrap();
    assert_eq!(back.shape(), vec![2, 3]);
    assert_eq!(back.tolist(), t.tolist());
    assert!(PyTensor::new(vec![1.0], vec![2]).is_err());
}

#[test]
fn double_backprop_matches_closed_form() {
    let a = PyTensor::new(vec![0.5, -1.0, 2.0], vec![3]).unwrap();
    let x = PyTensor::new(vec![0.1, 0.2, -0.3], vec![3]).unwrap();
    let v = PyTensor::new(vec![1.0, 0.5, -1.0], vec![3]).unwrap();
    let (g, hv, _) = exp_quadratic_grad_hvp(&a, &x, &v).unwrap();
    for i in 0..3 {
        let (ai, xi, vi) = (a.tolist()[i], x.tolist()[i], v.tolist()[i]);
        let e = (ai * xi).exp();
        assert!((g.tolist()[i] - (ai * e + xi)).abs() < 1e-12);
        assert!((hv.tolist()[i] - (ai * ai * e * vi + vi)).abs() < 1e-12);
    }
}

#[test]
fn label_metrics_and_config_round_trip() {
    let p = PyLabelMap::new(1, 2, 2, vec![1, 1, 0, 0]).unwrap();
    let q = PyLabelMap::new(1, 2, 2, vec![1, 0, 0, 0]).unwrap();
    assert_eq!(p.dice(&q, 1).unwrap(), 2.0 / 3.0);
    assert_eq!(p.asd(&q, 1, 1.0).unwrap(), q.asd(&p, 1, 1.0).unwrap());

    let mut c = PyConfig::new();
    c.set("train.episodes", "7").unwrap();
    let again = PyConfig::from_json(&c.to_json()).unwrap();
    assert_eq!(again.inner.train.episodes, 7);
    assert!(c.set("nope", "1").is_err());
}

mod common;

use common::*;
use ndarray::{array, Array2};
use permutofilt::lattice::{embed, find_simplex, FeatureVector, LatticeKey};
use permutofilt::permuto::*;
use rand::Rng;

fn scales(d: usize, v: f64) -> Vec<f64> {
    vec![v; d]
}

#[test]
fn splat_single_point_on_vertex() {
    let f = Array2::zeros((1, 3));
    let (splat, index) = build_splat(f.view(), &scales(3, 1.0)).unwrap();
    let (_, w) = splat.column(0);
    assert_eq!(w.iter().filter(|&&x| x == 1.0).count(), 1);
    assert_eq!(w.iter().filter(|&&x| x == 0.0).count(), 3);
    assert_eq!(index.len(), 4);
}

#[test]
fn splat_identical_points_identical_columns() {
    let f = array![[0.3, -1.2], [0.3, -1.2]];
    let (splat, index) = build_splat(f.view(), &[0.7, 1.1]).unwrap();
    assert_eq!(splat.column(0), splat.column(1));
    assert_eq!(index.len(), 3);
}

#[test]
fn splat_matches_direct_accumulation() {
    let mut rng = rng(11);
    let f = random_matrix(&mut rng, 50, 2, -3.0, 3.0);
    let x = random_matrix(&mut rng, 50, 2, -1.0, 1.0);
    let sc = [0.9, 1.3];
    let (splat, index) = build_splat(f.view(), &sc).unwrap();
    let lat = splat.splat(x.view()).unwrap();

    let mut direct = std::collections::BTreeMap::<Vec<i32>, [f64; 2]>::new();
    for i in 0..50 {
        let fv = FeatureVector::new(vec![f[[i, 0]] * sc[0], f[[i, 1]] * sc[1]]).unwrap();
        let enc = find_simplex(&embed(&fv).unwrap()).unwrap();
        for (v, w) in enc.vertices.iter().zip(&enc.barycentric) {
            let acc = direct.entry(v.0.clone()).or_insert([0.0; 2]);
            acc[0] += w * x[[i, 0]];
            acc[1] += w * x[[i, 1]];
        }
    }
    assert_eq!(direct.len(), index.len());
    for (key, acc) in direct {
        let j = index.get(&key).unwrap();
        assert!((lat[[j, 0]] - acc[0]).abs() < 1e-12);
        assert!((lat[[j, 1]] - acc[1]).abs() < 1e-12);
    }
    // Columns are convex weights.
    for (_, w) in splat.columns() {
        assert!(w.iter().all(|&v| v >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn slice_at_input_features_is_transpose_of_splat() {
    let mut rng = rng(3);
    let f = random_matrix(&mut rng, 40, 3, -2.0, 2.0);
    let sc = scales(3, 1.0);
    let (splat, index) = build_splat(f.view(), &sc).unwrap();
    let slice = build_slice(f.view(), &sc, &index).unwrap();
    assert_eq!(splat, slice);
}

#[test]
fn slice_far_point_is_empty() {
    let fin = array![[0.0, 0.0], [0.2, 0.1]];
    let fout = array![[100.0, -50.0]];
    let sc = [1.0, 1.0];
    let (_, index) = build_splat(fin.view(), &sc).unwrap();
    let slice = build_slice(fout.view(), &sc, &index).unwrap();
    assert_eq!(slice.column(0).0.len(), 0);
    let out = bnn_identity(array![[1.0], [2.0]].view(), fin.view(), fout.view(), &sc).unwrap();
    assert_eq!(out[[0, 0]], 0.0);
}

#[test]
fn slice_coverage_on_upsampling_grid() {
    // 4x4 low-res grid with intensity, sliced at an 8x8 grid.
    let mut rng = rng(5);
    let mut low = Vec::new();
    for y in 0..4 {
        for x in 0..4 {
            low.extend([x as f64 * 2.0 + 0.5, y as f64 * 2.0 + 0.5, rng.gen_range(0.0..1.0)]);
        }
    }
    let mut high = Vec::new();
    for y in 0..8 {
        for x in 0..8 {
            high.extend([x as f64, y as f64, rng.gen_range(0.0..1.0)]);
        }
    }
    let low = Array2::from_shape_vec((16, 3), low).unwrap();
    let high = Array2::from_shape_vec((64, 3), high).unwrap();
    let sc = [0.4, 0.4, 2.0];
    let (_, index) = build_splat(low.view(), &sc).unwrap();
    let slice = build_slice(high.view(), &sc, &index).unwrap();
    let coverage = slice_coverage(&slice);
    let mut full = 0;
    for i in 0..64 {
        let fv = FeatureVector::new(high.row(i).iter().zip(&sc).map(|(a, s)| a * s).collect())
            .unwrap();
        let enc = find_simplex(&embed(&fv).unwrap()).unwrap();
        let populated: f64 = enc
            .vertices
            .iter()
            .zip(&enc.barycentric)
            .filter(|(v, _)| index.get(&v.0).is_some())
            .map(|(_, w)| w)
            .sum();
        assert!(coverage[i] <= 1.0 + 1e-12);
        assert!((coverage[i] - populated).abs() < 1e-12);
        if enc.vertices.iter().all(|v| index.get(&v.0).is_some()) {
            assert!((coverage[i] - 1.0).abs() < 1e-9);
            full += 1;
        }
    }
    assert!(full > 0);
}

#[test]
fn blur_table_shapes() {
    let f = array![[0.0, 0.0]];
    let (_, index) = build_splat(f.view(), &[1.0, 1.0]).unwrap();
    let b0 = build_blur(&index, 0).unwrap();
    assert_eq!(b0.taps(), 1);
    assert_eq!(b0.row(0), (0..index.len() as u32).collect::<Vec<_>>().as_slice());

    // A single populated vertex: rows 1..6 all missing.
    let mut single = permutofilt::lattice::LatticeIndex::new(2);
    single.insert(&[0, 0, 0]);
    let b1 = build_blur(&single, 1).unwrap();
    assert_eq!(b1.taps(), 7);
    assert_eq!(b1.neighbor(0, 0), Some(0));
    for k in 1..7 {
        assert_eq!(b1.neighbor(k, 0), None);
    }
}

#[test]
fn blur_table_matches_bfs_oracle() {
    let mut rng = rng(21);
    for (d, s) in [(2, 1), (2, 2), (3, 1), (3, 2)] {
        let f = random_matrix(&mut rng, 60, d, -2.0, 2.0);
        let (_, index) = build_splat(f.view(), &scales(d, 1.0)).unwrap();
        let blur = build_blur(&index, s).unwrap();
        for j in 0..index.len() {
            let center = LatticeKey(index.key(j).to_vec());
            let expected: std::collections::BTreeSet<usize> = bfs_neighborhood(&center, s)
                .iter()
                .filter_map(|k| index.get(&k.0))
                .collect();
            let got: std::collections::BTreeSet<usize> =
                (0..blur.taps()).filter_map(|k| blur.neighbor(k, j)).collect();
            assert_eq!(got, expected, "d={d} s={s} vertex {j}");
            assert_eq!(blur.neighbor(0, j), Some(j));
        }
    }
}

#[test]
fn convolve_identity_zero_and_dense_gather() {
    let mut rng = rng(8);
    let f = random_matrix(&mut rng, 8, 2, -1.5, 1.5);
    let (_, index) = build_splat(f.view(), &[1.0, 1.0]).unwrap();
    let blur = build_blur(&index, 1).unwrap();
    let m = index.len();
    let lat = random_matrix(&mut rng, m, 2, -1.0, 1.0);

    let id = FilterBank::center_identity(2, 1, 2).unwrap();
    assert_eq!(convolve_lattice(lat.view(), &blur, &id, 7).unwrap(), lat);
    let zero = FilterBank::zeros(2, 1, 3, 2).unwrap();
    let z = convolve_lattice(lat.view(), &blur, &zero, 7).unwrap();
    assert_eq!(z.dim(), (m, 3));
    assert!(z.iter().all(|&v| v == 0.0));

    let bank = FilterBank::from_weights(
        2,
        1,
        3,
        2,
        (0..42).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let out = convolve_lattice(lat.view(), &blur, &bank, 3).unwrap();
    // Dense t x m gather K per input channel, then B K.
    for co in 0..3 {
        for j in 0..m {
            let mut acc = 0.0;
            for ci in 0..2 {
                for k in 0..7 {
                    let gathered = blur.neighbor(k, j).map_or(0.0, |v| lat[[v, ci]]);
                    acc += bank.get(co, ci, k) * gathered;
                }
            }
            assert!((out[[j, co]] - acc).abs() < 1e-12);
        }
    }
    assert!(convolve_lattice(lat.view(), &blur, &FilterBank::zeros(2, 2, 1, 1).unwrap(), 4).is_err());
    assert!(convolve_lattice(lat.view(), &blur, &FilterBank::zeros(2, 1, 1, 3).unwrap(), 4).is_err());
}

#[test]
fn convolve_is_chunk_invariant() {
    let mut rng = rng(9);
    let f = random_matrix(&mut rng, 300, 3, -3.0, 3.0);
    let (_, index) = build_splat(f.view(), &scales(3, 1.0)).unwrap();
    let blur = build_blur(&index, 2).unwrap();
    let m = index.len();
    let lat = random_matrix(&mut rng, m, 2, -1.0, 1.0);
    let bank = FilterBank::from_weights(3, 2, 2, 2, (0..260).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .unwrap();
    let reference = convolve_lattice(lat.view(), &blur, &bank, m).unwrap();
    for chunk in [1, 7, 4096] {
        assert_eq!(convolve_lattice(lat.view(), &blur, &bank, chunk).unwrap(), reference);
    }
}

#[test]
fn forward_trivial_cases() {
    let f = array![[0.0, 0.0]];
    let x = Signal::new(array![[2.5]], f.clone()).unwrap();
    let id = FilterBank::center_identity(2, 1, 1).unwrap();
    let out = forward(&x, f.view(), &[1.0, 1.0], &id).unwrap();
    assert_eq!(out[[0, 0]], 2.5);
    let zero = FilterBank::zeros(2, 1, 1, 1).unwrap();
    assert_eq!(forward(&x, f.view(), &[1.0, 1.0], &zero).unwrap()[[0, 0]], 0.0);
}

#[test]
fn forward_matches_dense_operator() {
    let mut rng = rng(30);
    let f = random_matrix(&mut rng, 30, 2, -2.0, 2.0);
    let fout = random_matrix(&mut rng, 25, 2, -2.0, 2.0);
    let x = random_matrix(&mut rng, 30, 2, -1.0, 1.0);
    let sc = [0.8, 1.2];
    let bank =
        FilterBank::from_weights(2, 1, 2, 2, (0..28).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
    let ops = LatticeOperators::new(f.view(), fout.view(), &sc, 1).unwrap();
    let got = ops.forward(x.view(), &bank).unwrap();
    let dense = DenseLattice::new(f.view(), fout.view(), &sc, 1).forward(x.view(), &bank);
    assert!(max_rel_diff(&got, &dense) < 1e-10);
}

#[test]
fn forward_is_bilinear() {
    let mut rng = rng(31);
    let f = random_matrix(&mut rng, 20, 3, -2.0, 2.0);
    let x = random_matrix(&mut rng, 20, 1, -1.0, 1.0);
    let ops = LatticeOperators::symmetric(f.view(), &scales(3, 1.0), 1).unwrap();
    let bank = FilterBank::from_weights(3, 1, 1, 1, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .unwrap();
    let base = ops.forward(x.view(), &bank).unwrap();
    let scaled_x = ops.forward((&x * 3.0).view(), &bank).unwrap();
    let mut b3 = bank.clone();
    b3.scale(3.0);
    let scaled_b = ops.forward(x.view(), &b3).unwrap();
    assert!(max_rel_diff(&scaled_x, &(&base * 3.0)) < 1e-12);
    assert!(max_rel_diff(&scaled_b, &(&base * 3.0)) < 1e-12);
}

#[test]
fn bnn_identity_convexity() {
    let mut rng = rng(4);
    let f = random_matrix(&mut rng, 40, 2, -1.0, 1.0);
    let sc = [1.0, 1.0];
    let constant = Array2::from_elem((40, 1), 0.37);
    let out = bnn_identity(constant.view(), f.view(), f.view(), &sc).unwrap();
    assert!(out.iter().all(|&v| (v - 0.37).abs() < 1e-12));

    let x = random_matrix(&mut rng, 40, 1, -2.0, 5.0);
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let out = bnn_identity(x.view(), f.view(), f.view(), &sc).unwrap();
    assert!(out.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
}

#[test]
fn grad_input_zero_and_dense_jacobian() {
    let mut rng = rng(40);
    let f = random_matrix(&mut rng, 12, 2, -1.5, 1.5);
    let fout = random_matrix(&mut rng, 10, 2, -1.5, 1.5);
    let sc = [1.0, 1.0];
    let ops = LatticeOperators::new(f.view(), fout.view(), &sc, 1).unwrap();
    let bank =
        FilterBank::from_weights(2, 1, 1, 1, (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
    let zero = ops.grad_input(Array2::zeros((10, 1)).view(), &bank).unwrap();
    assert!(zero.iter().all(|&v| v == 0.0));

    let dense = DenseLattice::new(f.view(), fout.view(), &sc, 1);
    let jac = dense.slice.dot(&dense.blur(&bank, 0, 0)).dot(&dense.splat); // 10 x 12
    for k in 0..10 {
        let mut e = Array2::zeros((10, 1));
        e[[k, 0]] = 1.0;
        let g = ops.grad_input(e.view(), &bank).unwrap();
        for i in 0..12 {
            assert!((g[[i, 0]] - jac[[k, i]]).abs() < 1e-12);
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = rng(41);
    let f = random_matrix(&mut rng, 15, 2, -1.5, 1.5);
    let fout = random_matrix(&mut rng, 11, 2, -1.5, 1.5);
    let sc = [1.0, 0.8];
    let ops = LatticeOperators::new(f.view(), fout.view(), &sc, 1).unwrap();
    let x = random_matrix(&mut rng, 15, 2, -1.0, 1.0);
    let bank =
        FilterBank::from_weights(2, 1, 3, 2, (0..42).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
    let out = ops.forward(x.view(), &bank).unwrap();
    // L = 1/2 |forward(x)|^2 -> upstream = forward(x).
    let gx = ops.grad_input(out.view(), &bank).unwrap();
    let gb = ops.grad_filter(out.view(), x.view(), &bank).unwrap();

    let mut loss_x = |p: &[f64]| {
        let xv = Array2::from_shape_vec((15, 2), p.to_vec()).unwrap();
        0.5 * ops.forward(xv.view(), &bank).unwrap().mapv(|v| v * v).sum()
    };
    let xs: Vec<f64> = x.iter().cloned().collect();
    for i in 0..xs.len() {
        let fd = central_diff(&mut loss_x, &xs, i, 1e-5);
        assert!(rel_err(gx.as_slice().unwrap()[i], fd, 1e-6) < 1e-5);
    }
    let mut loss_b = |p: &[f64]| {
        let b = FilterBank::from_weights(2, 1, 3, 2, p.to_vec()).unwrap();
        0.5 * ops.forward(x.view(), &b).unwrap().mapv(|v| v * v).sum()
    };
    let bw = bank.weights().to_vec();
    for i in 0..bw.len() {
        let fd = central_diff(&mut loss_b, &bw, i, 1e-5);
        assert!(rel_err(gb.weights()[i], fd, 1e-6) < 1e-5, "weight {i}");
    }

    let zero_x = ops.grad_filter(out.view(), Array2::zeros((15, 2)).view(), &bank).unwrap();
    assert!(zero_x.weights().iter().all(|&v| v == 0.0));
    let zero_g = ops.grad_filter(Array2::zeros((11, 3)).view(), x.view(), &bank).unwrap();
    assert!(zero_g.weights().iter().all(|&v| v == 0.0));
}

#[test]
fn adjointness() {
    let mut rng = rng(42);
    for trial in 0..10 {
        let d = 1 + trial % 3;
        let f = random_matrix(&mut rng, 25, d, -2.0, 2.0);
        let fout = random_matrix(&mut rng, 18, d, -2.0, 2.0);
        let ops = LatticeOperators::new(f.view(), fout.view(), &scales(d, 1.0), 2).unwrap();
        let t = ops.blur.taps();
        let bank = FilterBank::from_weights(d, 2, 2, 3, (0..6 * t).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let x = random_matrix(&mut rng, 25, 3, -1.0, 1.0);
        let y = random_matrix(&mut rng, 18, 2, -1.0, 1.0);
        let lhs = (&ops.forward(x.view(), &bank).unwrap() * &y).sum();
        let rhs = (&x * &ops.grad_input(y.view(), &bank).unwrap()).sum();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0));
    }
}

#[test]
fn normalized_and_self_excluded_backward() {
    let mut rng = rng(43);
    let f = random_matrix(&mut rng, 14, 2, -1.0, 1.0);
    let ops = LatticeOperators::symmetric(f.view(), &[1.2, 1.2], 1).unwrap();
    let x = random_matrix(&mut rng, 14, 2, -1.0, 1.0);
    let bank = FilterBank::from_weights(2, 1, 1, 1, (0..7).map(|_| rng.gen_range(0.2..1.0)).collect())
        .unwrap();
    let target = random_matrix(&mut rng, 14, 2, -1.0, 1.0);
    for (normalize, exclude_self) in [(false, true), (true, false), (true, true)] {
        let opts = FilterOptions { normalize, exclude_self };
        let resp = ops.apply(x.view(), &bank, opts).unwrap();
        let g = &resp.output - &target;
        let (gx, gb) = ops.apply_backward(x.view(), &bank, opts, &resp, g.view()).unwrap();
        let loss = |xv: &Array2<f64>, b: &FilterBank| {
            let out = ops.apply(xv.view(), b, opts).unwrap().output;
            0.5 * (&out - &target).mapv(|v| v * v).sum()
        };
        let xs: Vec<f64> = x.iter().cloned().collect();
        let mut lx = |p: &[f64]| loss(&Array2::from_shape_vec((14, 2), p.to_vec()).unwrap(), &bank);
        for i in 0..xs.len() {
            let fd = central_diff(&mut lx, &xs, i, 1e-6);
            assert!(rel_err(gx.as_slice().unwrap()[i], fd, 1e-6) < 1e-5, "{opts:?} x[{i}]");
        }
        let bw = bank.weights().to_vec();
        let mut lb = |p: &[f64]| loss(&x, &FilterBank::from_weights(2, 1, 1, 1, p.to_vec()).unwrap());
        for i in 0..bw.len() {
            let fd = central_diff(&mut lb, &bw, i, 1e-6);
            assert!(rel_err(gb.weights()[i], fd, 1e-6) < 1e-5, "{opts:?} b[{i}]");
        }
    }
}

#[test]
fn self_response_matches_dense_diagonal() {
    let mut rng = rng(44);
    let f = random_matrix(&mut rng, 16, 3, -1.0, 1.0);
    let sc = scales(3, 1.0);
    let ops = LatticeOperators::symmetric(f.view(), &sc, 1).unwrap();
    let bank = FilterBank::from_weights(3, 1, 1, 1, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .unwrap();
    let x = random_matrix(&mut rng, 16, 1, -1.0, 1.0);
    let dense = DenseLattice::new(f.view(), f.view(), &sc, 1);
    let op = dense.slice.dot(&dense.blur(&bank, 0, 0)).dot(&dense.splat);
    let got = ops.self_response(x.view(), &bank).unwrap();
    for i in 0..16 {
        assert!((got[[i, 0]] - op[[i, i]] * x[[i, 0]]).abs() < 1e-12);
    }
    let asym = LatticeOperators::new(f.view(), f.view(), &sc, 1).unwrap();
    assert!(asym.self_response(x.view(), &bank).is_err());
}

#[test]
fn pbf1_file_roundtrip() {
    let dir = std::env::temp_dir().join(format!("pbf1-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("g.pbf");
    let bank = gaussian_init(3, 2, 1.0).unwrap();
    bank.save(&path).unwrap();
    let back = FilterBank::load(&path).unwrap();
    for (a, b) in back.weights().iter().zip(bank.weights()) {
        assert_eq!(*a, *b as f32 as f64);
    }
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn joint_operators_extend_plain_ones() {
    let mut rng = rng(30);
    let fin = random_matrix(&mut rng, 40, 2, -2.0, 2.0);
    let fout = random_matrix(&mut rng, 25, 2, -3.0, 3.0);
    let x = random_matrix(&mut rng, 40, 2, -1.0, 1.0);
    let sc = [1.0, 1.0];
    let bank = gaussian_init(2, 1, 1.0).unwrap();
    let plain = LatticeOperators::new(fin.view(), fout.view(), &sc, 1).unwrap();
    let joint = LatticeOperators::joint(fin.view(), fout.view(), &sc, 1).unwrap();
    assert!(joint.num_vertices() >= plain.num_vertices());
    let a = plain.forward(x.view(), &bank).unwrap();
    let b = joint.forward(x.view(), &bank).unwrap();
    let coverage = slice_coverage(&plain.slice);
    for i in 0..25 {
        assert_eq!(joint.slice.column(i).0.len(), 3);
        if (coverage[i] - 1.0).abs() < 1e-12 {
            for c in 0..2 {
                assert!((a[[i, c]] - b[[i, c]]).abs() < 1e-12);
            }
        }
    }
    // A point sitting on an empty vertex next to a populated one still
    // receives mass through the blur.
    let fin = ndarray::array![[0.0, 0.0]];
    let fout = ndarray::array![[1.0, 0.3]];
    let x = ndarray::array![[1.0]];
    let plain = LatticeOperators::new(fin.view(), fout.view(), &sc, 1).unwrap();
    let joint = LatticeOperators::joint(fin.view(), fout.view(), &sc, 1).unwrap();
    let opts = FilterOptions { normalize: true, exclude_self: false };
    let p = plain.apply(x.view(), &bank, opts).unwrap().output[[0, 0]];
    let j = joint.apply(x.view(), &bank, opts).unwrap().output[[0, 0]];
    assert!(p == 0.0 || (p - 1.0).abs() < 1e-12);
    assert!((j - 1.0).abs() < 1e-12);
}

use std::io::Cursor;

use bipoint::data::{self, parse_off, read_dataset_file, sample_mesh, write_dataset_file};
use bipoint::{pack, train, xnor_popcount_matmul, Checkpoint, InferencePath, Model, ModelSpec, Primitive, Tensor, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn small_run(seed: u64) -> (Model<f32>, bipoint::Dataset) {
    let set = data::generate_primitives(&Primitive::ALL, 12, 32, 5).unwrap();
    let (train_set, test_set) = set.split(0.75, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f32>::build(&ModelSpec::new(5, 32), &mut rng).unwrap();
    let config = TrainConfig { epochs: 2, batch_size: 16, seed, deterministic: true, ..Default::default() };
    let report = train::train(&mut model, &train_set, Some(&test_set), &config).unwrap();
    assert_eq!(report.records.len(), 2);
    (model, test_set)
}

#[test]
fn checkpoint_reload_predicts_identically() {
    let (model, test_set) = small_run(1);
    let idx: Vec<usize> = (0..test_set.len()).collect();
    let (x, _) = test_set.batch::<f32>(&idx).unwrap();
    let before = model.predict(&x).unwrap();

    let dir = TempDir::new().unwrap();
    let path = dir.path().join("m.json");
    Checkpoint::new(model, Some(1), None).save(&path).unwrap();
    let loaded = Checkpoint::<f32>::load(&path).unwrap();
    let after = loaded.model.predict(&x).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&before), bits(&after));
}

#[test]
fn packed_and_simulated_paths_agree_after_training() {
    let (mut model, test_set) = small_run(2);
    model.prepare_packed();
    let idx: Vec<usize> = (0..test_set.len()).collect();
    let (x, _) = test_set.batch::<f32>(&idx).unwrap();
    let sim = model.predict_with(&x, InferencePath::Simulated).unwrap();
    let packed = model.predict_with(&x, InferencePath::Packed).unwrap();
    let argmax = |t: &Tensor<f32>| {
        (0..t.rows_cols().0)
            .map(|r| t.row(r).iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0)
            .collect::<Vec<_>>()
    };
    assert_eq!(argmax(&sim), argmax(&packed));
}

#[test]
fn dataset_file_round_trip() {
    let set = data::generate_primitives(&[Primitive::Sphere, Primitive::Torus], 3, 17, 9).unwrap();
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("d.pcd");
    write_dataset_file(&set, &path).unwrap();
    assert_eq!(read_dataset_file(&path).unwrap(), set);
}

#[test]
fn mesh_samples_lie_on_cube_surface() {
    let off = "OFF\n8 12 0\n\
        -1 -1 -1\n1 -1 -1\n1 1 -1\n-1 1 -1\n-1 -1 1\n1 -1 1\n1 1 1\n-1 1 1\n\
        3 0 1 2\n3 0 2 3\n3 4 6 5\n3 4 7 6\n3 0 4 5\n3 0 5 1\n\
        3 1 5 6\n3 1 6 2\n3 2 6 7\n3 2 7 3\n3 3 7 4\n3 3 4 0\n";
    let mesh = parse_off(Cursor::new(off)).unwrap();
    let total: f64 = (0..mesh.faces.len()).map(|f| mesh.triangle_area(f)).sum();
    assert!((total - 24.0).abs() < 1e-12);
    let cloud = sample_mesh(&mesh, 400, 3).unwrap();
    assert_eq!(cloud.len(), 400);
    // The sampled cloud is normalized, so every point sits on a cube of some common half-width.
    let half: Vec<f32> = cloud.points.iter().map(|p| p.iter().fold(0f32, |m, v| m.max(v.abs()))).collect();
    let (lo, hi) = half.iter().fold((f32::MAX, 0f32), |(lo, hi), &h| (lo.min(h), hi.max(h)));
    assert!(hi - lo < 1e-5, "half-widths {lo}..{hi}");
}

#[test]
fn packed_product_matches_sign_dot_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = Tensor::<f32>::normal(&[7, 131], 0.0, 1.0, &mut rng);
    let b = Tensor::<f32>::normal(&[5, 131], 0.0, 1.0, &mut rng);
    let out = xnor_popcount_matmul(&pack(&a), &pack(&b)).unwrap();
    let sign = |v: f32| if v > 0.0 { 1 } else { -1 };
    for i in 0..7 {
        for j in 0..5 {
            let want: i32 = a.row(i).iter().zip(b.row(j)).map(|(&x, &y)| sign(x) * sign(y)).sum();
            assert_eq!(out.get(i, j), want);
        }
    }
}

mod common;

use adafusion::checkpoint::Checkpoint;
use adafusion::model::FusionMode;
use adafusion::retrieval::{DbEntry, DescriptorDb};
use common::{pair_batch, random_small_net};

#[test]
fn checkpoint_round_trip_reproduces_outputs() {
    let net = random_small_net(3, FusionMode::Adaptive);
    let ckpt = Checkpoint::from_model(&net, "abc", 17, Some(0.5));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    let restored = loaded.to_model().unwrap();
    let batch = pair_batch(4, [40, 56, 1], [16, 16, 8]);
    let (a, _) = net.forward(&batch.images, &batch.voxels, false).unwrap();
    let (b, _) = restored.forward(&batch.images, &batch.voxels, false).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.descriptor, y.descriptor);
        assert_eq!(x.weights, y.weights);
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let net = random_small_net(5, FusionMode::Concat);
    let bytes = Checkpoint::from_model(&net, "h", 0, None).to_bytes().unwrap();
    for cut in [0, 4, 16, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        assert_eq!(err.exit_code(), 2, "truncated at {cut}");
    }
    let mut flipped = bytes.clone();
    let k = bytes.len() - 10;
    flipped[k] ^= 0x40;
    assert!(Checkpoint::from_bytes(&flipped).is_err());
    let mut wrong_magic = bytes;
    wrong_magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&wrong_magic).is_err());
}

#[test]
fn descriptor_db_round_trip() {
    let entries: Vec<DbEntry> = (0..20)
        .map(|i| DbEntry {
            frame_id: 100 + i,
            sequence_id: format!("seq{}", i % 3),
            position: [i as f64, -(i as f64), 0.5],
            descriptor: (0..8).map(|k| (i * 8 + k) as f64 / 7.0).collect(),
            alpha: [0.25, 0.75],
        })
        .collect();
    let db = DescriptorDb::from_entries(entries, "ckpt").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("db.bin");
    db.save(&path).unwrap();
    let loaded = DescriptorDb::load(&path).unwrap();
    assert_eq!(loaded, db);
    let bytes = std::fs::read(&path).unwrap();
    assert!(DescriptorDb::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

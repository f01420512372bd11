use std::collections::BTreeMap;
use std::path::PathBuf;

use proptest::prelude::*;
use stegozoo::featurex::{build_dataset, FeatureDataset, FeatureKind, Extractor};
use stegozoo::stegattack::{attack, AttackMode, AttackSpec, Payload};
use stegozoo::tensorstore::{Arch, ModelRecord, Tensor, WeightVector};

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_2-3-2.mzw")
}

/// 2-3-2 model whose parameter `k` in flatten order has value `k + 0.5`.
fn golden_model() -> ModelRecord {
    let arch: Arch = "2-3-2:tanh,identity".parse().unwrap();
    let mut meta = BTreeMap::new();
    meta.insert("id".to_string(), "golden".to_string());
    let tensors = vec![
        Tensor::new("l0.weight", vec![3, 2], vec![0.5, 1.5, 2.5, 3.5, 4.5, 5.5]).unwrap(),
        Tensor::new("l0.bias", vec![3], vec![6.5, 7.5, 8.5]).unwrap(),
        Tensor::new("l1.weight", vec![2, 3], vec![9.5, 10.5, 11.5, 12.5, 13.5, 14.5]).unwrap(),
        Tensor::new("l1.bias", vec![2], vec![15.5, 16.5]).unwrap(),
    ];
    ModelRecord::new(arch, tensors, meta).unwrap()
}

#[test]
fn flatten_order_is_layer_weight_then_bias() {
    let m = golden_model();
    let expected: Vec<f32> = (0..17).map(|k| k as f32 + 0.5).collect();
    assert_eq!(m.flatten().0, expected);
}

#[test]
fn golden_file_matches() {
    let bytes = golden_model().to_bytes();
    let path = golden_path();
    if std::env::var_os("STEGOZOO_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &bytes).unwrap();
    }
    let golden = std::fs::read(&path).expect("golden file present");
    assert_eq!(bytes, golden);

    // Decode the data section by hand: magic, header length, header, f32 LE.
    assert_eq!(&golden[..4], b"MZW1");
    let hlen = u32::from_le_bytes(golden[4..8].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&golden[8..8 + hlen]).unwrap();
    assert_eq!(header["tensors"][0]["name"], "l0.weight");
    assert_eq!(header["tensors"][3]["name"], "l1.bias");
    let data: Vec<f32> =
        golden[8 + hlen..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(data, golden_model().flatten().0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_bit_pattern_survives_save_and_load(words in prop::collection::vec(any::<u32>(), 17)) {
        let w = WeightVector(words.iter().map(|&b| f32::from_bits(b)).collect());
        let m = golden_model().with_weights(&w).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mzw");
        m.save(&p).unwrap();
        let back = ModelRecord::load(&p).unwrap();
        prop_assert!(back.bit_eq(&m));
        let got: Vec<u32> = back.flatten().0.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, words);
    }
}

/// Models whose attacked weights include NaN and infinities.
fn nan_inf_models() -> (Vec<ModelRecord>, Vec<ModelRecord>) {
    let base = golden_model();
    let mut benign = Vec::new();
    let mut attacked = Vec::new();
    for k in 0..4u32 {
        let mut words: Vec<u32> = base.flatten().0.iter().map(|v| v.to_bits()).collect();
        // Exponent all ones: an X-LSB write turns these into NaN (non-zero
        // mantissa) or keeps them infinite.
        words[0] = 0x7f80_0000;
        words[1] = 0xff80_0000;
        words[2] = 0x7fc0_0000 | k;
        let w = WeightVector(words.iter().map(|&b| f32::from_bits(b)).collect());
        let mut m = base.with_weights(&w).unwrap();
        m.meta.insert("id".into(), format!("m{k}"));
        m.meta.insert("label".into(), "benign".into());
        let a = attack(&m, AttackSpec::new(5, AttackMode::Fill).unwrap(), &Payload::from_bytes(&[0xA5, 0x0F])).unwrap();
        benign.push(m);
        attacked.push(a);
    }
    (benign, attacked)
}

#[test]
fn attack_produced_nan_and_inf_round_trip_through_mzw1_and_csv() {
    let (benign, attacked) = nan_inf_models();
    let first = attacked[0].flatten();
    assert!(first.0[0].is_nan() && first.0[1].is_nan(), "attack should turn infinities into NaN");
    assert!(benign[0].flatten().0[0].is_infinite());

    let dir = tempfile::tempdir().unwrap();
    for (i, m) in attacked.iter().chain(&benign).enumerate() {
        let p = dir.path().join(format!("{i}.mzw"));
        m.save(&p).unwrap();
        assert!(ModelRecord::load(&p).unwrap().bit_eq(m));
    }

    let ds = build_dataset(&benign, &attacked, Extractor::Weights).unwrap();
    let p = dir.path().join("w.csv");
    ds.write_csv(&p).unwrap();
    let back = FeatureDataset::read_csv(&p, FeatureKind::Weights).unwrap();
    assert!(back.bit_eq(&ds));
    // Widened NaN keeps its payload bits.
    let nan_feature = ds.rows.iter().find(|r| r.label.is_malicious()).unwrap().features[0];
    assert!(nan_feature.is_nan());
    let nan32 = attacked[0].flatten().0[0].to_bits();
    assert_eq!(nan_feature.to_bits() >> 29 & 0x3f_ffff, (nan32 & 0x3f_ffff) as u64);
    assert!(std::fs::read_to_string(&p).unwrap().contains("nan:0x"));
}

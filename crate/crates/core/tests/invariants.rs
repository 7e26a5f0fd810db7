use std::path::Path;

use kvbabel::checkpoint::Checkpoint;
use kvbabel::corpus::{gen_corpus, gen_parallel, Cipher, LanguageSpec};
use kvbabel::lm::{LanguageModel, ModelConfig, TokenBatch};
use kvbabel::translator::{CacheTranslator, IdentityTranslator};
use kvbabel::{Error, TensorData};
use proptest::prelude::*;

fn tensor() -> impl Strategy<Value = TensorData> {
    prop::collection::vec(1usize..4, 0..3).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(-1e6f64..1e6, n).prop_map(move |data| TensorData {
            shape: shape.clone(),
            data,
        })
    })
}

fn checkpoint() -> impl Strategy<Value = Checkpoint> {
    prop::collection::vec(("[a-z]{1,8}", tensor()), 0..5).prop_map(|tensors| {
        Checkpoint::new(serde_json::json!({"k": tensors.len()}), tensors)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoint_bytes_round_trip(c in checkpoint()) {
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn any_flipped_bit_is_caught(c in checkpoint(), at in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = c.to_bytes().unwrap();
        let i = at.index(bytes.len());
        bytes[i] ^= 1 << bit;
        let r = Checkpoint::from_bytes(&bytes, Path::new("mem"));
        prop_assert!(r.is_err());
        if i >= 8 {
            let corrupt = matches!(r, Err(Error::Corruption { .. }));
            prop_assert!(corrupt, "byte {} gave {:?}", i, r.err());
        }
    }

    #[test]
    fn parallel_text_inverts(a in 0u64..1000, b in 0u64..1000, seed in any::<u64>(), len in 2usize..20) {
        prop_assume!(a != b);
        let (sa, sb) = (LanguageSpec::with_seed(a), LanguageSpec::with_seed(b));
        let cipher = Cipher::new(&sa, &sb).unwrap();
        for p in gen_parallel(&sa, &sb, 3, len, seed).unwrap() {
            prop_assert_eq!(p.dst_text.len(), p.src_text.len());
            prop_assert_eq!(cipher.invert(&p.dst_text), p.src_text);
        }
    }

    #[test]
    fn corpus_is_a_pure_function_of_seed(lang in 0u64..100, seed in any::<u64>(), n in 1usize..300) {
        let spec = LanguageSpec::with_seed(lang);
        let a = gen_corpus(&spec, n, seed).unwrap();
        prop_assert_eq!(a.len(), n);
        prop_assert!(a.iter().all(|&t| t < spec.vocab_size));
        prop_assert_eq!(a, gen_corpus(&spec, n, seed).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn identity_translation_to_self_keeps_the_cache(seed in 0u64..50, s in 1usize..10, b in 1usize..3) {
        let m = LanguageModel::init(ModelConfig::toy(2), seed).unwrap();
        let ids: Vec<usize> = (0..b * s).map(|i| (i * 7 + seed as usize) % 64).collect();
        let cache = m.forward(&TokenBatch::new(ids, b, s).unwrap()).unwrap().1;
        let id = IdentityTranslator { configs: vec![m.config().clone()] };
        let out = id.translate_cache(0, 0, &cache).unwrap();
        prop_assert_eq!(out.keys.to_vec(), cache.keys.to_vec());
        prop_assert_eq!(out.values.to_vec(), cache.values.to_vec());
    }
}

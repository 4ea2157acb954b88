//! Fast self-diagnostics: verifies the numeric core end to end without any
//! files. Each property prints one line; the first failure names itself.

use cdtm_core::data::Dataset;
use cdtm_core::eval::{auc, auc_pairwise};
use cdtm_core::gradcheck::check_gradients;
use cdtm_core::model::{
    encode_batch, forward, init_params, prediction_loss, register_unit, ClickBatch,
    GateOverride, ModelConfig, UnitNodes,
};
use cdtm_core::rng::{derive_rng, Purpose};
use cdtm_core::schema::{build_schema, DomainConfig, GlobalFieldConfig, GlobalSchema, SchemaConfig};
use cdtm_core::tape::{EwKind, Tape};
use cdtm_core::tensor::Tensor;
use cdtm_core::train::{Adam, TrainConfig};
use rand::Rng;

fn tiny_schema() -> GlobalSchema {
    build_schema(&SchemaConfig {
        global_fields: vec![GlobalFieldConfig { id: 0, vocab_size: 5 }],
        domains: vec![
            DomainConfig {
                id: 0,
                name: "a".into(),
                transferable: vec![0],
                specific_vocab_sizes: vec![3],
                n_rows: 8,
                base_ctr: 0.5,
                alpha: 1.0,
            },
            DomainConfig {
                id: 1,
                name: "b".into(),
                transferable: vec![0],
                specific_vocab_sizes: vec![],
                n_rows: 8,
                base_ctr: 0.5,
                alpha: 1.0,
            },
        ],
    })
    .expect("static schema is valid")
}

fn tiny_batch(schema: &GlobalSchema) -> ClickBatch {
    let ds = Dataset {
        domain_id: 0,
        field_count: 2,
        values: vec![0, 1, 3, 0, 2, 2, 4, 1],
        labels: vec![1, 0, 1, 0],
    };
    encode_batch(schema, schema.domain(0).expect("domain 0"), &ds, &[0, 1, 2, 3])
        .expect("batch encodes")
}

fn unit_from_ids(ids: &[cdtm_core::NodeId]) -> UnitNodes {
    UnitNodes {
        shared: ids[0],
        dse: ids[1],
        transfer: ids[2],
        attn_w0: ids[3],
        attn_b0: ids[4],
        attn_w1: ids[5],
        attn_b1: ids[6],
        deep_w1: ids[7],
        deep_b1: ids[8],
        deep_w2: ids[9],
        deep_b2: ids[10],
        out_w: ids[11],
        out_b: ids[12],
    }
}

fn gradient_check() -> Result<(), String> {
    let schema = tiny_schema();
    let config = ModelConfig {
        embedding_dim: 3,
        attention_hidden: 2,
        ..ModelConfig::default()
    };
    let batch = tiny_batch(&schema);
    let params = init_params(&schema, &config, 21, &[0]).map_err(|e| e.to_string())?;
    let d = &params.domains[0];
    let tensors: Vec<Tensor> = std::iter::once(&params.shared.table)
        .chain(d.tensors().into_iter().map(|(_, _, t)| t))
        .cloned()
        .collect();

    let report = check_gradients(
        &tensors,
        |tape, ids| {
            let nodes = unit_from_ids(ids);
            let trace = forward(tape, &config, &nodes, &batch, GateOverride::None)
                .map_err(|e| cdtm_core::TensorError::Invalid(e.to_string()))?;
            prediction_loss(tape, trace.p_hat, &batch.labels)
                .map_err(|e| cdtm_core::TensorError::Invalid(e.to_string()))
        },
        1e-5,
        1e-4,
    )
    .map_err(|e| e.to_string())?;
    if report.passed() {
        Ok(())
    } else {
        Err(format!(
            "max relative gradient error {} over {} entries (worst {:?})",
            report.max_rel_error, report.entries_checked, report.worst
        ))
    }
}

fn auc_oracle() -> Result<(), String> {
    let mut rng = derive_rng(17, Purpose::Split, 1);
    for case in 0..100 {
        let n = rng.gen_range(2..300);
        let scores: Vec<f64> = (0..n)
            .map(|_| (rng.gen_range(0.0_f64..1.0) * 16.0).round() / 16.0)
            .collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.4) as u8).collect();
        labels[0] = 1;
        labels[n - 1] = 0;
        let fast = auc(&scores, &labels).map_err(|e| e.to_string())?;
        let slow = auc_pairwise(&scores, &labels).map_err(|e| e.to_string())?;
        if (fast - slow).abs() > 1e-12 {
            return Err(format!(
                "case {case}: rank-sum {fast} vs pairwise {slow} (n={n})"
            ));
        }
    }
    Ok(())
}

fn combination_identities() -> Result<(), String> {
    let schema = tiny_schema();
    let config = ModelConfig {
        embedding_dim: 3,
        attention_hidden: 2,
        ..ModelConfig::default()
    };
    let batch = tiny_batch(&schema);
    let mut params = init_params(&schema, &config, 4, &[0]).map_err(|e| e.to_string())?;

    // gate pinned at 1: output must ignore the shared table entirely
    let outputs = |params: &cdtm_core::model::CdtmParams, gate: GateOverride| {
        let mut tape = Tape::new();
        let nodes = register_unit(&mut tape, params, 0);
        let trace = forward(&mut tape, &config, &nodes, &batch, gate).expect("forward");
        (
            tape.value(trace.p_hat).data().to_vec(),
            tape.value(trace.combined).data().to_vec(),
            tape.value(trace.e_c).data().to_vec(),
            trace.g_c.map(|g| tape.value(g).data().to_vec()),
        )
    };

    let (p1, comb1, e_c, _) = outputs(&params, GateOverride::Constant(1.0));
    if comb1 != e_c {
        return Err("gate=1 did not reduce to the domain embedding".into());
    }
    let mut perturbed = params.clone();
    for v in perturbed.shared.table.data_mut() {
        *v += 7.5;
    }
    let (p1b, _, _, _) = outputs(&perturbed, GateOverride::Constant(1.0));
    if p1 != p1b {
        return Err("gate=1 output changed when the shared table changed".into());
    }

    params.domains[0].transfer = Tensor::eye(config.embedding_dim);
    let (_, comb0, _, g_c) = outputs(&params, GateOverride::Constant(0.0));
    if Some(comb0) != g_c {
        return Err("gate=0 with identity transfer did not reduce to the shared embedding".into());
    }
    Ok(())
}

fn transfer_recovery() -> Result<(), String> {
    // E = G . R for a known R; minimizing mean ||E - G . T||^2 in T must
    // recover R.
    let k = 4;
    let n = 64;
    let mut rng = derive_rng(33, Purpose::ParamInit, 9);
    let g = Tensor::new(
        vec![n, k],
        (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("shape");
    let r = Tensor::new(
        vec![k, k],
        (0..k * k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("shape");

    let mut t = Tensor::eye(k);
    let cfg = TrainConfig::default();
    let mut adam = Adam::new(&[vec![k, k]]);
    for _ in 0..4000 {
        let mut tape = Tape::new();
        let g_id = tape.constant(g.clone());
        let e_target = {
            let r_id = tape.constant(r.clone());
            tape.matmul(g_id, r_id).expect("shapes agree")
        };
        let t_id = tape.leaf(t.clone().with_requires_grad(true));
        let mapped = tape.matmul(g_id, t_id).expect("shapes agree");
        let diff = tape
            .elementwise(e_target, mapped, EwKind::Sub)
            .expect("shapes agree");
        let ss = tape.sum_squares(diff);
        let loss = tape.scale(ss, 1.0 / n as f64);
        let grads = tape.backward(loss).map_err(|e| e.to_string())?;
        let gt = grads.get(t_id).expect("transfer gradient").clone();
        adam.step(
            &mut [&mut t],
            &[Some(&gt)],
            &[cdtm_core::model::ParamKind::Dense],
            0.01,
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
        );
    }
    let err = t.dist_frobenius(&r);
    if err < 1e-3 {
        Ok(())
    } else {
        Err(format!("||T - R||_F = {err} after fitting"))
    }
}

pub fn run_selftest() -> Result<(), String> {
    let checks: [(&str, fn() -> Result<(), String>); 4] = [
        ("gradient-check", gradient_check),
        ("auc-oracle", auc_oracle),
        ("combination-identities", combination_identities),
        ("transfer-recovery", transfer_recovery),
    ];
    for (name, check) in checks {
        match check() {
            Ok(()) => println!("ok {name}"),
            Err(detail) => {
                println!("FAIL {name}: {detail}");
                return Err(format!("selftest property {name} failed: {detail}"));
            }
        }
    }
    println!("all selftest properties passed");
    Ok(())
}

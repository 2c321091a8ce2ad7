//! A model whose edge network routes every agent edge below the entmax
//! threshold. Its predictions must not depend on other agents at all.

use socvae::diagnostics::{agent_ratio, gradient_importance, leave_one_out_ade};
use socvae::graph_nets::NodeKind;
use socvae::model::{Model, ModelConfig, PreparedScene, Variant};
use socvae::world::{generate, ScenarioTemplate, Template};

const HIDDEN: usize = 8;

fn collapsed(variant: Variant) -> Model {
    let mut cfg = ModelConfig::driving(variant);
    cfg.hidden = HIDDEN;
    cfg.latent = 4;
    let mut model = Model::new(cfg, 21).unwrap();
    let p = &mut model.params;
    let lane_flag = 2 * HIDDEN + 4;

    // Message unit 0 is +1000 on lanelet edges and -1000 on agent edges
    // before the layer norm, so after it the unit is ≈ +√(H−1) or exactly 0.
    let w = p.id("context.gamp.edge.w").unwrap();
    let t = p.get_mut(w);
    for r in 0..t.rows() {
        t.data_mut()[r * HIDDEN] = if r == lane_flag { 2000.0 } else { 0.0 };
    }
    let b = p.id("context.gamp.edge.b").unwrap();
    p.get_mut(b).data_mut()[0] = -1000.0;

    // The score reads unit 0 only.
    let s = p.id("context.gamp.score.w").unwrap();
    for (i, v) in p.get_mut(s).data_mut().iter_mut().enumerate() {
        *v = if i == 0 { 10.0 } else { 0.0 };
    }
    model
}

fn scenes() -> Vec<PreparedScene> {
    generate(&ScenarioTemplate::new(Template::Merge), 4, 31)
        .unwrap()
        .iter()
        .map(|s| PreparedScene::new(s).unwrap())
        .collect()
}

#[test]
fn agent_edges_get_exactly_zero_weight() {
    for variant in [Variant::Vae, Variant::Cvae, Variant::SocialCvae] {
        let model = collapsed(variant);
        for ps in scenes() {
            let report = model.attention(&[&ps]).unwrap();
            let s = &ps.scene;
            let mut lanes = 0;
            for row in report.incoming(s.id, s.target) {
                match row.kind {
                    NodeKind::Agent => assert_eq!(row.weight, 0.0),
                    NodeKind::Lanelet => lanes += 1,
                }
            }
            assert!(lanes > 0);
            assert_eq!(agent_ratio(&report, s.id, s.target), Some(0.0));
        }
    }
}

#[test]
fn other_histories_get_zero_gradient() {
    let model = collapsed(Variant::SocialCvae);
    let th = model.config.history;
    for ps in scenes() {
        let target = ps.scene.target_index().unwrap();
        let jac = model.final_point_jacobian(&ps).unwrap();
        assert_eq!(jac.len(), 1);
        let mut own = 0.0;
        for coord in &jac[0] {
            for (j, block) in coord.chunks(2 * th).enumerate() {
                if j == target {
                    own += block.iter().map(|v| v.abs()).sum::<f64>();
                } else {
                    assert!(block.iter().all(|&v| v == 0.0), "agent {j} leaks into the target");
                }
            }
        }
        assert!(own > 0.0);
        assert_eq!(gradient_importance(&model, &ps).unwrap(), vec![Some(0.0)]);
    }
}

#[test]
fn masking_neighbors_changes_nothing() {
    let model = collapsed(Variant::Cvae);
    for ps in scenes() {
        let loo = leave_one_out_ade(&model, &ps).unwrap();
        assert_eq!(loo.len(), 1);
        let v = loo[0].expect("scene has neighbors");
        assert!(v.abs() <= 1e-12, "looADE {v}");
    }
}

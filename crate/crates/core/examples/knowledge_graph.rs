//! Builds the prototype graph and the super-graph for one episode, runs one
//! round of message passing in each direction and shows the edge structure.

use caml::encoding::compute_prototypes;
use caml::episodes::{make_task_distribution, DistributionConfig, Split};
use caml::graphs::{assemble_super_graph, build_prototype_graph, KG_EDGE, NMP_WEIGHT, TASK_EDGE};
use caml::meta::{init_state, ModelConfig, TrainConfig};
use caml::rng::{streams, RngStream};
use caml::tape::Tape;

fn main() -> caml::Result<()> {
    let cfg = TrainConfig {
        kg_nodes: 4,
        kg_dim: 16,
        ..Default::default()
    };
    let dist = make_task_distribution(&DistributionConfig::default(), cfg.n_way, RngStream::new(0, streams::DISTRIBUTION))?;
    let state = init_state(&cfg, &ModelConfig::default(), &dist)?;
    let ep = dist.sample_episode(Split::Train, cfg.n_way, cfg.k_shot, 5, RngStream::new(0, 1))?;

    let tape = Tape::new();
    let p = &state.params;
    let embed = state.arch.embed.0.bind(&tape, p, false);
    let protos = compute_prototypes(&state.arch.embed, &embed, tape.constant(ep.support_x()), &ep.support_y(), ep.n_way)?;
    let pg = build_prototype_graph(protos, tape.constant(p.expect(TASK_EDGE).clone()))?;
    let sg = assemble_super_graph(&pg, state.kg.bind(&tape), tape.constant(p.expect(KG_EDGE).clone()), cfg.gamma)?;

    println!("prototype adjacency:\n{:.3}", pg.adjacency.value());
    let a = sg.adjacency.value();
    let cross = a.view((0, sg.n_proto), (sg.n_proto, sg.n_kg));
    println!("cross edges (sum {:.6}):\n{:.4}", cross.sum(), cross);

    let w = tape.constant(p.expect(NMP_WEIGHT).clone());
    let enriched = sg.update_prototypes(w)?.value();
    let h_hat = sg.update_knowledge(w)?.value();
    println!(
        "prototype shift {:.4}, knowledge shift {:.4}",
        (enriched - sg.features.value().rows(0, sg.n_proto)).norm(),
        (h_hat - &state.kg.node_features).norm()
    );
    Ok(())
}

use glat::corpus::{save_corpus, CorpusManifest, WorldModel};

use crate::io::{manifest_path, print_json, CliResult, Manifest, WithPath};
use crate::GenCorpusArgs;

pub fn gen_corpus(a: GenCorpusArgs) -> CliResult<()> {
    let world = WorldModel::load(&a.world).at(&a.world)?;
    let graphs = world.sample_corpus(a.n, a.seed);
    save_corpus(&graphs, world.vocabulary(), &a.out).at(&a.out)?;
    let summary = CorpusManifest {
        world: world.spec().name.clone(),
        seed: a.seed,
        graphs: graphs.len(),
        rule_hash: world.rule_hash(),
    };
    Manifest {
        vocabulary: world.vocabulary().to_json(),
        corpus: Some(summary.clone()),
        world: Some(world.spec().clone()),
    }
    .save(&manifest_path(&a.out))?;
    print_json(&summary)
}

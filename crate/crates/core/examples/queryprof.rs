use ggsplat_core::io;
use ggsplat_core::query::{argmax_pixel, QueryEmbeddings, RelevanceEvaluator};
use ggsplat_core::raster::{self, ChannelSet, RasterConfig, RenderCamera};
use ggsplat_core::synth::CANONICAL_NAMES;

fn main() {
    let data = io::load_scene::<f32>("/tmp/smoke/scene/scene.json".as_ref()).unwrap();
    let field = io::read_field::<f32>("/tmp/smoke/full.ggf".as_ref()).unwrap();
    let decoder = io::read_decoder::<f32>("/tmp/smoke/full.ggdc".as_ref()).unwrap();
    let entries = &data.embedding_entries;
    let name = std::env::args().nth(1).unwrap();
    let id: u32 = name.strip_prefix("obj").unwrap().parse().unwrap();
    let query = entries.iter().find(|(n, _)| n == &name).unwrap().1.clone();
    let canonical: Vec<Vec<f32>> = CANONICAL_NAMES
        .iter()
        .filter_map(|cn| entries.iter().find(|(n, _)| n == *cn).map(|(_, v)| v.clone()))
        .collect();
    let emb = QueryEmbeddings { query, canonical };
    let cfg = RasterConfig::default();
    let eval = RelevanceEvaluator::new(&decoder, &emb).unwrap();
    for (v, view) in data.views.iter().enumerate() {
        let cam = RenderCamera::of_view(view);
        let cache = raster::project(&field, &cam, &cfg);
        let ch = ChannelSet { feature: true, ..Default::default() };
        let (out, _) = raster::render_forward(&field, &cam, ch, &cache, &cfg);
        let rel = eval.relevance_map(out.feature.as_ref().unwrap()).unwrap();
        let (r, c) = argmax_pixel(&rel);
        let gt = data.instances[v].id(r, c);
        if gt != id {
            // Nearest gt pixel of the object, for context.
            let mut best = usize::MAX;
            let mut nearest = (0usize, 0usize);
            for rr in 0..view.height() {
                for cc in 0..view.width() {
                    if data.instances[v].id(rr, cc) == id {
                        let d2 = rr.abs_diff(r).pow(2) + cc.abs_diff(c).pow(2);
                        if d2 < best {
                            best = d2;
                            nearest = (rr, cc);
                        }
                    }
                }
            }
            println!(
                "view {v:2}: MISS argmax ({r},{c}) rel {:.4} on gt id {gt}; object rel there {:.4}; nearest obj px {:?} dist {:.1}",
                rel.at(r, c),
                rel.at(nearest.0, nearest.1),
                nearest,
                (best as f64).sqrt()
            );
        } else {
            println!("view {v:2}: hit  argmax ({r},{c}) rel {:.4}", rel.at(r, c));
        }
    }
}

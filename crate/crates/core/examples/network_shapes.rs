//! Builds every network of the default architecture and prints its topology and the shapes
//! it produces on one training patch.

use jcnf::data::{generate_scene, sample_patches};
use jcnf::networks::{topology_manifest, Architecture, Init, Peers, ScaleRole};
use jcnf::pipeline::Model;

fn main() -> jcnf::Result<()> {
    let arch = Architecture::default();
    let model = Model::new(&arch, Init::He, 0)?;
    print!("{}", topology_manifest(&model.global.layer_specs()));
    print!("{}", topology_manifest(&model.gradient.layer_specs()));
    print!("{}", topology_manifest(&model.scales.layer_specs()));

    let scene = generate_scene(1, 64, 64)?;
    let patch = sample_patches(&scene, 1, 0)?.remove(0);
    let out = model.gradient.forward_patch(&patch.image, &patch.coarse_depth, Peers::Live)?;
    println!("patch {:?} -> depth {:?}, albedo {:?}, shading {:?}", patch.image.shape(), out.depth.shape(), out.albedo.shape(), out.shading.shape());
    for role in ScaleRole::ALL {
        println!("{} scale net: {} -> {} channels", role.name(), role.input_channels(), role.output_channels());
    }
    let coarse = model.global.forward(&scene.image)?;
    println!("global net: {}x{} image -> {}x{} coarse depth", scene.width(), scene.height(), coarse.width(), coarse.height());
    Ok(())
}

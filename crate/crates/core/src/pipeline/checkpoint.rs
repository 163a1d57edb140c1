//! Checkpoint directory: `manifest.txt` (topology), one `.jcnp` file per network, `state.txt`
//! (architecture and progress) and `loss_log.csv`.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::{LossRow, Model, TrainState};
use crate::error::{Error, Result};
use crate::networks::{topology_manifest, Architecture, GlobalDepthNet, GradientNets, ScaleNet, ScaleNets, ScaleRole};
use crate::tensor::{read_params, write_params, NetworkParams};

/// Parameter files of a checkpoint. `intrinsic_gradient.jcnp` holds both the albedo and the
/// shading gradient nets (shared stem plus two heads).
pub const CHECKPOINT_FILES: [&str; 6] = [
    "global_depth.jcnp",
    "depth_gradient.jcnp",
    "intrinsic_gradient.jcnp",
    "depth_scale.jcnp",
    "albedo_scale.jcnp",
    "shading_scale.jcnp",
];

const STATE_HEADER: &str = "# jcnf checkpoint v1";

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn write_net(path: &Path, params: &NetworkParams) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_params(&mut w, params).map_err(|e| Error::io(path, e))?;
    std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
}

fn read_net(path: &Path) -> Result<NetworkParams> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_params(BufReader::new(f)).map_err(|e| match e {
        Error::Format { reason, .. } => Error::Format {
            path: path.into(),
            reason,
        },
        other => other.context(path.display().to_string()),
    })
}

pub fn save_checkpoint(dir: impl AsRef<Path>, state: &TrainState) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = &state.model;
    let nets = [
        &m.global.params,
        &m.gradient.depth,
        &m.gradient.intrinsic,
        &m.scales.depth.params,
        &m.scales.albedo.params,
        &m.scales.shading.params,
    ];
    for (name, params) in CHECKPOINT_FILES.iter().zip(nets) {
        write_net(&dir.join(name), params)?;
    }
    let mut specs = m.global.layer_specs();
    specs.extend(m.gradient.layer_specs());
    specs.extend(m.scales.layer_specs());
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("manifest.txt", topology_manifest(&specs))?;
    let a = &m.arch;
    let state_text = format!(
        "{STATE_HEADER}\nglobal_input = {}\nglobal_widths = {}\nglobal_fc = {}\ngrad_widths = {}\ngrad_kernel = {}\nscale_widths = {}\nscale_bypass = {}\nglobal_trained = {}\nrounds_done = {}\nconverged = {}\nseed = {}\n",
        a.global_input,
        join(&a.global_widths),
        a.global_fc,
        join(&a.grad_widths),
        a.grad_kernel,
        join(&a.scale_widths),
        m.scales.is_bypassed(),
        state.global_trained,
        state.rounds_done,
        state.converged,
        state.seed,
    );
    write("state.txt", state_text)?;
    write("loss_log.csv", state.loss_log_csv())
}

fn parse_state(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(STATE_HEADER) {
        return Err(Error::Format {
            path: path.into(),
            reason: "missing checkpoint header".into(),
        });
    }
    let mut out = HashMap::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
            path: path.into(),
            reason: format!("bad line {line:?}"),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<TrainState> {
    let dir = dir.as_ref();
    let state_path = dir.join("state.txt");
    let kv = parse_state(&state_path)?;
    let bad = |key: &str| Error::Format {
        path: state_path.clone(),
        reason: format!("missing or invalid {key}"),
    };
    let get = |key: &str| kv.get(key).ok_or_else(|| bad(key));
    let num = |key: &str| -> Result<usize> { get(key)?.parse().map_err(|_| bad(key)) };
    let flag = |key: &str| -> Result<bool> { get(key)?.parse().map_err(|_| bad(key)) };
    fn list<const N: usize>(s: &str) -> Option<[usize; N]> {
        let v: Vec<usize> = s.split(',').map(|x| x.trim().parse().ok()).collect::<Option<_>>()?;
        v.try_into().ok()
    }
    let arr = |key: &str| get(key).map(String::as_str);
    let arch = Architecture {
        global_input: num("global_input")?,
        global_widths: list(arr("global_widths")?).ok_or_else(|| bad("global_widths"))?,
        global_fc: num("global_fc")?,
        grad_widths: list(arr("grad_widths")?).ok_or_else(|| bad("grad_widths"))?,
        grad_kernel: num("grad_kernel")?,
        scale_widths: list(arr("scale_widths")?).ok_or_else(|| bad("scale_widths"))?,
    };
    let bypass = flag("scale_bypass")?;
    let mut nets: Vec<NetworkParams> = CHECKPOINT_FILES
        .iter()
        .map(|name| read_net(&dir.join(name)))
        .collect::<Result<_>>()?;
    let mut take = || nets.remove(0);
    let global = GlobalDepthNet::from_params(&arch, take())?;
    let gradient = GradientNets::from_params(&arch, take(), take())?;
    let scales = ScaleNets {
        depth: ScaleNet::from_params(ScaleRole::Depth, &arch, take(), bypass)?,
        albedo: ScaleNet::from_params(ScaleRole::Albedo, &arch, take(), bypass)?,
        shading: ScaleNet::from_params(ScaleRole::Shading, &arch, take(), bypass)?,
    };
    let log_path = dir.join("loss_log.csv");
    let log_text = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let loss_log = log_text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            LossRow::parse(l).ok_or_else(|| Error::Format {
                path: log_path.clone(),
                reason: format!("bad row {l:?}"),
            })
        })
        .collect::<Result<_>>()?;
    Ok(TrainState {
        model: Model {
            arch,
            global,
            gradient,
            scales,
        },
        global_trained: flag("global_trained")?,
        rounds_done: num("rounds_done")?,
        converged: flag("converged")?,
        seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
        loss_log,
    })
}

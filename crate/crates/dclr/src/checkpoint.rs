//! Trained segmenter on disk: `manifest.txt` with the encoder shape and
//! parameter order, one `DTEN` file per parameter under `params/`, and the
//! cluster centroids in `centroids.dten`.

use std::fs;
use std::path::Path;

use dclr_core::encoder::{DUNetConfig, EncoderModel, ProjectionConfig};
use dclr_core::pipeline::Segmenter;

use crate::dten;
use crate::error::{Error, Result};
use crate::manifest::Manifest;

pub const KIND: &str = "dclr-checkpoint";

pub fn save(dir: &Path, seg: &Segmenter, extra: &[(&str, String)]) -> Result<()> {
    let params = dir.join("params");
    fs::create_dir_all(&params).map_err(|e| Error::io(&params, e))?;
    let unet = seg.encoder.unet();
    let proj = seg.encoder.projection();
    let mut m = Manifest::new(KIND);
    m.push("encoder.depth", unet.depth)
        .push("encoder.base_channels", unet.base_channels)
        .push("encoder.input_side", unet.input_side)
        .push("encoder.embed_dim", unet.embed_dim)
        .push("encoder.extra_bottleneck_conv", unet.extra_bottleneck_conv)
        .push("encoder.hidden_dim", proj.hidden_dim)
        .push("encoder.proj_dim", proj.proj_dim)
        .push("tumour_cluster", seg.tumour_cluster);
    for (key, value) in extra {
        m.push(key, value);
    }
    for (name, t) in seg.encoder.named_params() {
        dten::write(&params.join(format!("{name}.dten")), t)?;
        m.push("param", name);
    }
    dten::write(&dir.join("centroids.dten"), &seg.centroids)?;
    m.write(&dir.join("manifest.txt"))
}

pub fn load(dir: &Path) -> Result<Segmenter> {
    let path = dir.join("manifest.txt");
    let m = Manifest::read(&path, KIND)?;
    let unet = DUNetConfig {
        depth: m.parse_value("encoder.depth", &path)?,
        base_channels: m.parse_value("encoder.base_channels", &path)?,
        input_side: m.parse_value("encoder.input_side", &path)?,
        embed_dim: m.parse_value("encoder.embed_dim", &path)?,
        extra_bottleneck_conv: m.parse_value("encoder.extra_bottleneck_conv", &path)?,
    };
    let projection = ProjectionConfig {
        hidden_dim: m.parse_value("encoder.hidden_dim", &path)?,
        proj_dim: m.parse_value("encoder.proj_dim", &path)?,
    };
    let named = m
        .all("param")
        .map(|name| {
            let file = dir.join("params").join(format!("{name}.dten"));
            if !file.exists() {
                return Err(Error::MissingInput {
                    path: file,
                    what: "checkpoint parameter",
                });
            }
            Ok((name.to_string(), dten::read(&file)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let encoder = EncoderModel::from_named(unet, projection, named)?;
    let centroids = dten::read(&dir.join("centroids.dten"))?;
    if centroids.shape() != [2, unet.embed_dim] {
        return Err(Error::format(
            dir.join("centroids.dten"),
            format!("expected shape [2, {}], found {:?}", unet.embed_dim, centroids.shape()),
        ));
    }
    let tumour_cluster: usize = m.parse_value("tumour_cluster", &path)?;
    if tumour_cluster > 1 {
        return Err(Error::format(&path, format!("tumour_cluster {tumour_cluster} is not 0 or 1")));
    }
    Ok(Segmenter {
        encoder,
        centroids,
        tumour_cluster,
    })
}

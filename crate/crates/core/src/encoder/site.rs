use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PolarError, Result};

/// Linear transforms that can carry a low-rank update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    Q,
    K,
    V,
    O,
    #[serde(rename = "MLP1")]
    Mlp1,
    #[serde(rename = "MLP2")]
    Mlp2,
    FinalProj,
}

impl Site {
    pub const ALL: [Site; 7] = [
        Site::Q,
        Site::K,
        Site::V,
        Site::O,
        Site::Mlp1,
        Site::Mlp2,
        Site::FinalProj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Site::Q => "Q",
            Site::K => "K",
            Site::V => "V",
            Site::O => "O",
            Site::Mlp1 => "MLP1",
            Site::Mlp2 => "MLP2",
            Site::FinalProj => "FinalProj",
        }
    }
}

impl FromStr for Site {
    type Err = PolarError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "Q" => Ok(Site::Q),
            "K" => Ok(Site::K),
            "V" => Ok(Site::V),
            "O" => Ok(Site::O),
            "MLP1" => Ok(Site::Mlp1),
            "MLP2" => Ok(Site::Mlp2),
            "FINALPROJ" | "PROJ" | "FINAL_PROJ" => Ok(Site::FinalProj),
            other => Err(PolarError::Config(format!("unknown site '{other}'"))),
        }
    }
}

/// A weight matrix inside the text encoder: 1-based layer plus site.
/// `FinalProj` sits after the last layer and always carries layer 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteAddress {
    pub layer: usize,
    pub site: Site,
}

impl SiteAddress {
    pub fn new(layer: usize, site: Site) -> Self {
        let layer = if site == Site::FinalProj { 0 } else { layer };
        Self { layer, site }
    }

    pub fn final_proj() -> Self {
        Self::new(0, Site::FinalProj)
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.site != Site::FinalProj && (self.layer == 0 || self.layer > n_layers) {
            return Err(PolarError::Config(format!(
                "site {self} outside layers 1..={n_layers}"
            )));
        }
        Ok(())
    }

    /// Zero-based index of the first layer whose computation this site
    /// affects; `n_layers` for the final projection.
    pub(crate) fn first_layer(&self, n_layers: usize) -> usize {
        if self.site == Site::FinalProj {
            n_layers
        } else {
            self.layer - 1
        }
    }

    /// Parses a comma list such as `"4:V,3:Q,proj"`.
    pub fn parse_list(s: &str) -> Result<Vec<SiteAddress>> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for SiteAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.site == Site::FinalProj {
            write!(f, "proj")
        } else {
            write!(f, "{}:{}", self.layer, self.site.name())
        }
    }
}

impl FromStr for SiteAddress {
    type Err = PolarError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.split_once(':') {
            Some((layer, site)) => {
                let site: Site = site.parse()?;
                let layer = layer
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| PolarError::Config(format!("bad layer in site '{s}'")))?;
                Ok(SiteAddress::new(layer, site))
            }
            None => {
                let site: Site = s.parse()?;
                if site == Site::FinalProj {
                    Ok(SiteAddress::final_proj())
                } else {
                    Err(PolarError::Config(format!("site '{s}' needs a layer, e.g. 4:{s}")))
                }
            }
        }
    }
}

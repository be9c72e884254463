use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pca::PcaModel;
use super::svm::{Kernel, SvmModel};
use super::Matrix;
use crate::binio;
use crate::error::{Error, Result};
use crate::glcm::{feature_vector, GlcmSpec};
use crate::heatmap::Heatmap;
use crate::Label;

const MAGIC: &[u8; 4] = b"CTGM";
const VERSION: u32 = 1;

/// Everything needed to classify a heatmap.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub glcm: GlcmSpec,
    pub pca: PcaModel,
    pub svm: SvmModel,
}

#[derive(Serialize, Deserialize)]
struct Header {
    glcm: GlcmSpec,
    feature_len: usize,
    pca_dims: usize,
    kernel: Kernel,
    c: f64,
    rho: f64,
    support_vectors: usize,
}

impl GlobalModel {
    pub fn new(glcm: GlcmSpec, pca: PcaModel, svm: SvmModel) -> Result<Self> {
        if pca.feature_len() != glcm.feature_len() || svm.dims != pca.dims {
            return Err(Error::Shape(format!(
                "model parts disagree: GLCM {} -> PCA {}x{} -> SVM {}",
                glcm.feature_len(),
                pca.feature_len(),
                pca.dims,
                svm.dims
            )));
        }
        Ok(Self { glcm, pca, svm })
    }

    /// Signed SVM decision value of a heatmap; positive means fake.
    pub fn score(&self, heatmap: &Heatmap) -> Result<f64> {
        let f = feature_vector(heatmap, &self.glcm)?;
        let z = self.pca.transform(&f.to_f64())?;
        self.svm.decision(&z)
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let header = Header {
            glcm: self.glcm.clone(),
            feature_len: self.pca.feature_len(),
            pca_dims: self.pca.dims,
            kernel: self.svm.kernel,
            c: self.svm.c,
            rho: self.svm.rho,
            support_vectors: self.svm.support_vectors.rows,
        };
        let mut w = binio::Writer::new(out, "model bundle");
        w.magic(MAGIC)?;
        w.u32(VERSION)?;
        w.bytes(&serde_json::to_vec(&header)?)?;
        w.f64s(&self.pca.mean)?;
        w.f64s(&self.pca.components)?;
        w.f64s(&self.pca.explained_variance)?;
        w.f64s(&self.svm.support_vectors.data)?;
        w.f64s(&self.svm.dual_coef)?;
        w.finish()?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = binio::Reader::new(input, "model bundle");
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Corruption(format!("model bundle version {version}")));
        }
        let header: Header = serde_json::from_slice(&r.bytes()?)
            .map_err(|e| Error::Corruption(format!("model bundle header: {e}")))?;
        let (d, k, m) = (header.feature_len, header.pca_dims, header.support_vectors);
        let mean = r.f64s()?;
        let components = r.f64s()?;
        let explained = r.f64s()?;
        let sv = r.f64s()?;
        let dual = r.f64s()?;
        if mean.len() != d
            || components.len() != k * d
            || explained.len() != k
            || sv.len() != m * k
            || dual.len() != m
        {
            return Err(Error::Corruption(
                "model bundle payload sizes disagree with header".into(),
            ));
        }
        let pca = PcaModel {
            mean,
            dims: k,
            components,
            explained_variance: explained,
        };
        let svm = SvmModel {
            kernel: header.kernel,
            c: header.c,
            dims: k,
            support_vectors: Matrix::new(m, k, sv)?,
            dual_coef: dual,
            rho: header.rho,
        };
        GlobalModel::new(header.glcm, pca, svm).map_err(|e| Error::Corruption(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}

/// Slice verdict from its heatmap: fake iff the decision value is positive.
pub fn predict_global(model: &GlobalModel, heatmap: &Heatmap) -> Result<(Label, f64)> {
    let s = model.score(heatmap)?;
    Ok((Label::from_fake(s > 0.0), s))
}

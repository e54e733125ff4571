#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "hlguide/micro_transformer.hpp"
#include "hlguide/model.hpp"
#include "hlguide/one_layer_toy.hpp"
#include "hlguide/table_model.hpp"
#include "hlguide/weights_io.hpp"

namespace hlguide {

/// Small radiology-flavoured vocabulary used by the built-in MicroTransformer.
inline Vocabulary default_vocabulary() {
  static const std::vector<std::string> kWords = {
      "?", ".", ",", "-", ":", ";", "(", ")",
      "a", "an", "the", "is", "are", "there", "this", "that", "what", "which", "where", "in", "on", "of",
      "with", "and", "or", "no", "yes", "true", "false", "answer", "image", "shows", "seen", "under", "left",
      "right", "upper", "lower", "lung", "lungs", "heart", "liver", "kidney", "brain", "chest", "abdomen",
      "diaphragm", "free", "air", "fluid", "mass", "lesion", "nodule", "effusion", "pneumothorax",
      "pneumonia", "fracture", "edema", "normal", "abnormal", "enlarged", "small", "large", "ct", "mri",
      "x", "ray", "pa", "ap", "posterior", "anterior", "view", "scan", "contrast", "cyst", "tumor",
      "organ", "bone", "vessel", "cardiomegaly", "atelectasis", "consolidation", "opacity", "pleural",
  };
  return Vocabulary::with_reserved(kWords);
}

/// Loads a MicroTransformer or OneLayerToy from a weight file plus vocabulary file.
inline std::unique_ptr<GuidableModel> load_model(const std::filesystem::path& weights,
                                                 const std::filesystem::path& vocab_path) {
  const WeightFile wf = read_weight_file(weights);
  Vocabulary vocab = Vocabulary::load(vocab_path);
  const std::string kind = wf.header.at("kind").get<std::string>();
  if (kind == "micro_transformer") {
    return std::make_unique<MicroTransformer>(MicroTransformer::from_weights(wf, std::move(vocab)));
  }
  if (kind == "one_layer_toy") {
    return std::make_unique<OneLayerToy>(OneLayerToy::from_weights(wf, std::move(vocab)));
  }
  throw ConfigError("unknown model kind in weight file: " + kind);
}

}  // namespace hlguide

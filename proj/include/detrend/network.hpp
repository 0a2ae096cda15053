#pragma once

#include <map>
#include <string>
#include <vector>

#include "detrend/autograd.hpp"
#include "detrend/cells.hpp"
#include "detrend/prng.hpp"

namespace detrend {

enum class ModelKind { convgru, frame_cnn };

std::string_view to_string(ModelKind k);
ModelKind parse_model_kind(std::string_view s);

// conv(ReLU) -> max -> ConvGRU -> max -> ConvGRU -> global avg -> FC heads.
// The frame_cnn baseline keeps the same skeleton with plain conv(ReLU)
// layers in place of the recurrent ones and sees frames independently.
struct NetworkConfig {
  ModelKind model = ModelKind::convgru;
  std::size_t channels = 3, height = 112, width = 112;
  std::size_t conv1_channels = 32, conv1_kernel = 7, conv1_stride = 3, conv1_pad = 0;
  std::size_t pool1 = 3;  // window = stride
  std::size_t gru1_channels = 64, gru2_channels = 128, gru_kernel = 3;
  std::size_t pool2 = 2;
  double scale = 1.0;  // multiplies the three channel widths
  std::vector<std::size_t> heads{15};
  NormMethod norm = NormMethod::none;
  Placement placement = Placement::hidden;
  double update_bias = -2.0;
  double sigma = 0.07;
  std::size_t sampled_frames = 25;  // frame_cnn only

  static NetworkConfig table1(std::vector<std::size_t> heads);
  // 28x28 grayscale desk-scale variant.
  static NetworkConfig desk(std::vector<std::size_t> heads);

  std::size_t width_of(std::size_t base) const;
  CellConfig cell(std::size_t layer) const;  // layer 3 or 5
  void validate() const;
};

struct LayerShape {
  std::string name;
  std::size_t channels, height, width;
};

// Output shape of every layer up to the global average pool (whose entry
// holds the pooling window).
std::vector<LayerShape> shape_chain(const NetworkConfig& config);

struct ModelState {
  NetworkConfig config;
  ag::ParamSet params;
  std::map<std::string, CellNormState> norm;  // keyed by layer prefix
  std::uint64_t seed = 0;
};

std::vector<std::string> parameter_names(const NetworkConfig& config);
ModelState build(const NetworkConfig& config, std::uint64_t seed);
ModelState build(const NetworkConfig& config, Prng& prng);

// True for weight tensors (W, U, conv and FC weights); false for biases,
// gains and shifts.
bool is_weight(const std::string& name);

// One mini-batch of equally cropped sequences, padded to the longest one.
struct VideoBatch {
  std::vector<Tensor> steps;         // [N, C, H, W] per timestep
  std::vector<ag::RowMask> masks;    // per timestep
  std::vector<std::size_t> lengths;  // per sample
  std::size_t size() const { return lengths.size(); }
};

struct LayerTrace {
  std::string layer;
  std::vector<StepVars> steps;
};

struct ForwardResult {
  std::vector<ag::Var> logits;  // per head, [N, C_n]
  ag::Var readout;              // top recurrent output at each sample's last step
  std::vector<LayerTrace> layers;
};

// Runs the recurrent network and reads out at each sample's final valid step.
ForwardResult forward_video(ModelState& model, ag::Tape& tape, const ag::VarMap& vars,
                            const VideoBatch& batch, norm::Mode mode);

// Per-frame CNN on `sampled_frames` equally spaced frames per sample; logits
// are averaged over the sampled frames.
ForwardResult forward_frame_baseline(const ModelState& model, ag::Tape& tape,
                                     const ag::VarMap& vars, const VideoBatch& batch);

// Indices of n frames equally spaced over [0, length).
std::vector<std::size_t> sampled_frame_indices(std::size_t length, std::size_t n);

ForwardResult forward(ModelState& model, ag::Tape& tape, const ag::VarMap& vars,
                      const VideoBatch& batch, norm::Mode mode);

// Softmax probabilities per head, no gradient tracking.
std::vector<Tensor> predict(ModelState& model, const VideoBatch& batch, norm::Mode mode,
                            Precision precision);

}  // namespace detrend

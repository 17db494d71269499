#include "snp/config.hpp"

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace snp {

int RunConfig::task_T() const {
  if (T > 0) return T;
  if (task == "c") return 50;
  return 20;
}

void RunConfig::validate() const {
  const std::vector<std::string> models = {"snp", "np", "tgqn", "gqn"};
  if (std::find(models.begin(), models.end(), model) == models.end())
    throw std::invalid_argument("config: unknown model '" + model + "'");
  if (is_scene_model()) {
    if (task != "prediction" && task != "tracking")
      throw std::invalid_argument("config: scene models need task prediction|tracking");
  } else {
    if (task != "a" && task != "b" && task != "c")
      throw std::invalid_argument("config: 1D models need task a|b|c");
  }
  if (precision != "f32" && precision != "f64")
    throw std::invalid_argument("config: precision must be f32 or f64");
  if (alpha_schedule != "auto" && alpha_schedule != "off" &&
      alpha_schedule.rfind("fixed:", 0) != 0)
    throw std::invalid_argument("config: alpha_schedule must be auto, off, or fixed:<iteration>");
  if (pd_prob < 0 || pd_prob > 1) throw std::invalid_argument("config: pd_prob out of [0,1]");
  if (iterations < 0 || train_episodes < 1 || batch() < 1 || threads < 1)
    throw std::invalid_argument("config: non-positive run sizes");
}

namespace {

struct Field {
  enum Type { kInt, kDouble, kString, kU64 } type;
  void* ptr;
};

std::map<std::string, Field> field_table(RunConfig& c) {
  return {
      {"model", {Field::kString, &c.model}},
      {"task", {Field::kString, &c.task}},
      {"T", {Field::kInt, &c.T}},
      {"learning_rate", {Field::kDouble, &c.learning_rate}},
      {"batch_size", {Field::kInt, &c.batch_size}},
      {"iterations", {Field::kInt, &c.iterations}},
      {"alpha_schedule", {Field::kString, &c.alpha_schedule}},
      {"pd_prob", {Field::kDouble, &c.pd_prob}},
      {"seed", {Field::kU64, &c.seed}},
      {"precision", {Field::kString, &c.precision}},
      {"data", {Field::kString, &c.data}},
      {"train_episodes", {Field::kInt, &c.train_episodes}},
      {"eval_episodes", {Field::kInt, &c.eval_episodes}},
      {"checkpoint_every", {Field::kInt, &c.checkpoint_every}},
      {"log_every", {Field::kInt, &c.log_every}},
      {"out_dir", {Field::kString, &c.out_dir}},
      {"threads", {Field::kInt, &c.threads}},
      {"clip_norm", {Field::kDouble, &c.clip_norm}},
      {"target_subsample", {Field::kInt, &c.target_subsample}},
      {"eval_latent_samples", {Field::kInt, &c.eval_latent_samples}},
      {"hidden", {Field::kInt, &c.hidden}},
      {"zdim", {Field::kInt, &c.zdim}},
      {"image_hw", {Field::kInt, &c.image_hw}},
      {"latent_hw", {Field::kInt, &c.latent_hw}},
      {"rep_depth", {Field::kInt, &c.rep_depth}},
      {"conv_hidden", {Field::kInt, &c.conv_hidden}},
      {"enc_depth", {Field::kInt, &c.enc_depth}},
      {"z_depth", {Field::kInt, &c.z_depth}},
      {"draw_steps", {Field::kInt, &c.draw_steps}},
      {"renderer_iters", {Field::kInt, &c.renderer_iters}},
      {"z_proj_depth", {Field::kInt, &c.z_proj_depth}},
      {"rgb_var", {Field::kDouble, &c.rgb_var}},
  };
}

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  auto fields = field_table(cfg);
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    auto it = fields.find(key);
    if (it == fields.end())
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" +
                                  key + "'");
    try {
      switch (it->second.type) {
        case Field::kInt:
          *static_cast<int*>(it->second.ptr) = std::stoi(val);
          break;
        case Field::kDouble:
          *static_cast<double*>(it->second.ptr) = std::stod(val);
          break;
        case Field::kU64:
          *static_cast<uint64_t*>(it->second.ptr) = std::stoull(val);
          break;
        case Field::kString:
          *static_cast<std::string*>(it->second.ptr) = val;
          break;
      }
    } catch (const std::exception&) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": bad value '" + val +
                                  "' for key '" + key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

std::string config_to_text(const RunConfig& cfg) {
  RunConfig copy = cfg;
  auto fields = field_table(copy);
  std::ostringstream out;
  for (const auto& [key, f] : fields) {
    out << key << " = ";
    switch (f.type) {
      case Field::kInt:
        out << *static_cast<int*>(f.ptr);
        break;
      case Field::kDouble: {
        char buf[64];
        snprintf(buf, sizeof(buf), "%.17g", *static_cast<double*>(f.ptr));
        out << buf;
        break;
      }
      case Field::kU64:
        out << *static_cast<uint64_t*>(f.ptr);
        break;
      case Field::kString:
        out << *static_cast<std::string*>(f.ptr);
        break;
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace snp

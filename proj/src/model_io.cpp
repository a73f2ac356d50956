#include "sbc/model_io.hpp"

#include "sbc/lif.hpp"
#include "sbc/metrics.hpp"
#include "sbc/quant.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>

namespace sbc {

using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Envelope plumbing
// ---------------------------------------------------------------------------

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& buf, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(buf, bits);
}

void put_i32(std::string& buf, std::int32_t v) {
  put_u32(buf, static_cast<std::uint32_t>(v));
}

void put_i16(std::string& buf, std::int16_t v) {
  std::uint16_t bits = static_cast<std::uint16_t>(v);
  buf.push_back(static_cast<char>(bits & 0xff));
  buf.push_back(static_cast<char>((bits >> 8) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& data, const std::string& path)
      : d_(data), path_(path) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(d_[pos_ + i]))
           << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(d_[pos_ + i]))
           << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string bytes(std::uint64_t n) {
    need(n);
    std::string s = d_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void expect_magic(const char* magic) {
    need(4);
    if (d_.compare(pos_, 4, magic) != 0)
      throw CorruptPayload(path_ + ": bad magic");
    pos_ += 4;
  }
  void expect_end() {
    if (pos_ != d_.size())
      throw CorruptPayload(path_ + ": trailing bytes after payload");
  }

 private:
  void need(std::uint64_t n) {
    if (pos_ + n > d_.size()) throw CorruptPayload(path_ + ": truncated file");
  }
  const std::string& d_;
  std::string path_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorruptPayload(path + ": cannot open");
  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return data;
}

void write_file(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidArgument(path + ": cannot open for writing");
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw InvalidArgument(path + ": write failed");
}

float f32_from_bits(std::uint32_t bits) {
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

// ---------------------------------------------------------------------------
// Tensor blob packing
// ---------------------------------------------------------------------------

struct BlobWriter {
  std::string data;

  json matrix(const Matrix& m) {
    json ref;
    ref["offset"] = data.size();
    ref["rows"] = m.rows();
    ref["cols"] = m.cols();
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        put_f32(data, static_cast<float>(m(i, j)));
    return ref;
  }
  json vector(const Vector& v) {
    json ref;
    ref["offset"] = data.size();
    ref["len"] = v.size();
    for (Eigen::Index i = 0; i < v.size(); ++i)
      put_f32(data, static_cast<float>(v[i]));
    return ref;
  }
  json codes(const CodeMatrix& m) {
    json ref;
    ref["offset"] = data.size();
    ref["rows"] = m.rows();
    ref["cols"] = m.cols();
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) put_i16(data, m(i, j));
    return ref;
  }
};

struct BlobReader {
  const std::string& blob;
  std::string path;

  void check(std::uint64_t offset, std::uint64_t bytes) const {
    if (offset + bytes > blob.size())
      throw ShapeInconsistent(path + ": tensor exceeds blob bounds");
  }
  Matrix matrix(const json& ref) const {
    std::uint64_t off = ref.at("offset").get<std::uint64_t>();
    Eigen::Index rows = ref.at("rows").get<Eigen::Index>();
    Eigen::Index cols = ref.at("cols").get<Eigen::Index>();
    if (rows < 0 || cols < 0) throw ShapeInconsistent(path + ": negative dims");
    check(off, 4ull * rows * cols);
    Matrix m(rows, cols);
    std::size_t p = off;
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b)
          bits |= static_cast<std::uint32_t>(
                      static_cast<unsigned char>(blob[p + b]))
                  << (8 * b);
        p += 4;
        double v = static_cast<double>(f32_from_bits(bits));
        if (!std::isfinite(v))
          throw CorruptPayload(path + ": non-finite tensor value");
        m(i, j) = v;
      }
    return m;
  }
  Vector vector(const json& ref) const {
    std::uint64_t off = ref.at("offset").get<std::uint64_t>();
    Eigen::Index len = ref.at("len").get<Eigen::Index>();
    if (len < 0) throw ShapeInconsistent(path + ": negative length");
    check(off, 4ull * len);
    Vector v(len);
    std::size_t p = off;
    for (Eigen::Index i = 0; i < len; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b)
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[p + b]))
                << (8 * b);
      p += 4;
      double x = static_cast<double>(f32_from_bits(bits));
      if (!std::isfinite(x))
        throw CorruptPayload(path + ": non-finite tensor value");
      v[i] = x;
    }
    return v;
  }
  CodeMatrix codes(const json& ref) const {
    std::uint64_t off = ref.at("offset").get<std::uint64_t>();
    Eigen::Index rows = ref.at("rows").get<Eigen::Index>();
    Eigen::Index cols = ref.at("cols").get<Eigen::Index>();
    if (rows < 0 || cols < 0) throw ShapeInconsistent(path + ": negative dims");
    check(off, 2ull * rows * cols);
    CodeMatrix m(rows, cols);
    std::size_t p = off;
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) {
        std::uint16_t bits =
            static_cast<std::uint16_t>(static_cast<unsigned char>(blob[p])) |
            (static_cast<std::uint16_t>(static_cast<unsigned char>(blob[p + 1]))
             << 8);
        p += 2;
        m(i, j) = static_cast<std::int16_t>(bits);
      }
    return m;
  }
};

json shape_to_json(const TensorShape& s) {
  return json{{"c", s.c}, {"h", s.h}, {"w", s.w}};
}

TensorShape shape_from_json(const json& j) {
  TensorShape s;
  s.c = j.at("c").get<int>();
  s.h = j.at("h").get<int>();
  s.w = j.at("w").get<int>();
  if (s.c < 1 || s.h < 1 || s.w < 1)
    throw ShapeInconsistent("non-positive tensor shape");
  return s;
}

json tau_to_json(double tau_m) {
  if (is_if_tau(tau_m)) return "inf";
  return tau_m;
}

double tau_from_json(const json& j) {
  if (j.is_string()) {
    if (j.get<std::string>() == "inf") return kIfTau;
    throw CorruptPayload("unknown tau_m string");
  }
  return j.get<double>();
}

json quant_to_json(const QuantInfo& qi, BlobWriter& blob) {
  json q;
  q["bits"] = qi.bits;
  q["codes"] = blob.codes(qi.codes);
  q["scales"] = blob.vector(qi.scales);
  return q;
}

QuantInfo quant_from_json(const json& q, const BlobReader& blob) {
  QuantInfo qi;
  qi.bits = q.at("bits").get<int>();
  if (qi.bits < 2 || qi.bits > 16)
    throw ShapeInconsistent("quantization bits outside [2, 16]");
  qi.codes = blob.codes(q.at("codes"));
  qi.scales = blob.vector(q.at("scales"));
  if (qi.scales.size() != qi.codes.cols())
    throw ShapeInconsistent("quant scales length differs from code columns");
  long lo = -(1L << (qi.bits - 1)), hi = (1L << (qi.bits - 1)) - 1;
  for (Eigen::Index i = 0; i < qi.codes.rows(); ++i)
    for (Eigen::Index j = 0; j < qi.codes.cols(); ++j)
      if (qi.codes(i, j) < lo || qi.codes(i, j) > hi)
        throw CorruptPayload("quantization code outside level bounds");
  return qi;
}

Matrix reconstruct_from_quant(const QuantInfo& qi) {
  Matrix w(qi.codes.rows(), qi.codes.cols());
  for (Eigen::Index j = 0; j < qi.codes.cols(); ++j)
    for (Eigen::Index i = 0; i < qi.codes.rows(); ++i)
      w(i, j) = static_cast<double>(qi.codes(i, j)) * qi.scales[j];
  return w;
}

}  // namespace

// ---------------------------------------------------------------------------
// Model files
// ---------------------------------------------------------------------------

void save_model(const std::string& path, const NetworkSpec& net) {
  BlobWriter blob;
  json manifest;
  manifest["version"] = kFormatVersion;
  manifest["input_shape"] = shape_to_json(net.input_shape);
  json layers = json::array();
  for (const Layer& l : net.layers) {
    json jl;
    jl["input"] = l.input;
    switch (l.kind) {
      case LayerKind::Linear: {
        const auto& lin = l.as<LinearLayer>();
        jl["kind"] = "linear";
        if (lin.quant) {
          jl["quant"] = quant_to_json(*lin.quant, blob);
          jl["d_in"] = lin.weight.rows();
          jl["d_out"] = lin.weight.cols();
        } else {
          jl["weight"] = blob.matrix(lin.weight);
        }
        if (lin.bias.size() > 0) jl["bias"] = blob.vector(lin.bias);
        break;
      }
      case LayerKind::Conv2d: {
        const auto& cv = l.as<Conv2dLayer>();
        jl["kind"] = "conv2d";
        jl["in_ch"] = cv.in_ch;
        jl["out_ch"] = cv.out_ch;
        jl["kh"] = cv.kh;
        jl["kw"] = cv.kw;
        jl["stride"] = cv.stride;
        jl["pad"] = cv.pad;
        if (cv.quant)
          jl["quant"] = quant_to_json(*cv.quant, blob);
        else
          jl["weight"] = blob.matrix(cv.weight);
        if (cv.bias.size() > 0) jl["bias"] = blob.vector(cv.bias);
        break;
      }
      case LayerKind::BatchNorm: {
        const auto& bn = l.as<BatchNormLayer>();
        jl["kind"] = "batchnorm";
        jl["eps"] = bn.eps;
        jl["gamma"] = blob.vector(bn.gamma);
        jl["beta"] = blob.vector(bn.beta);
        jl["mean"] = blob.vector(bn.mean);
        jl["var"] = blob.vector(bn.var);
        break;
      }
      case LayerKind::LIF: {
        const auto& lf = l.as<LIFLayer>();
        jl["kind"] = "lif";
        jl["tau_m"] = tau_to_json(lf.params.tau_m);
        jl["v_th"] = lf.params.v_th;
        break;
      }
      case LayerKind::Flatten:
        jl["kind"] = "flatten";
        break;
      case LayerKind::Pool: {
        const auto& p = l.as<PoolLayer>();
        jl["kind"] = "pool";
        jl["k"] = p.k;
        jl["stride"] = p.stride;
        break;
      }
      case LayerKind::Add: {
        const auto& a = l.as<AddLayer>();
        jl["kind"] = "add";
        jl["lhs"] = a.lhs;
        jl["rhs"] = a.rhs;
        jl["mode"] = a.mode == ShortcutMode::Concat ? "concat" : "ignore";
        break;
      }
    }
    layers.push_back(std::move(jl));
  }
  manifest["layers"] = std::move(layers);

  std::string out;
  out += "SNNM";
  put_u32(out, kFormatVersion);
  std::string mtext = manifest.dump();
  put_u64(out, mtext.size());
  out += mtext;
  put_u64(out, blob.data.size());
  out += blob.data;
  write_file(path, out);
}

NetworkSpec load_model(const std::string& path) {
  std::string data = read_file(path);
  Reader r(data, path);
  r.expect_magic("SNNM");
  std::uint32_t version = r.u32();
  if (version != kFormatVersion)
    throw VersionMismatch(path + ": model format version " +
                          std::to_string(version));
  std::string mtext = r.bytes(r.u64());
  std::string blob_bytes = r.bytes(r.u64());
  r.expect_end();

  json manifest;
  try {
    manifest = json::parse(mtext);
  } catch (const json::parse_error& e) {
    throw CorruptPayload(path + ": manifest parse error: " + e.what());
  }
  BlobReader blob{blob_bytes, path};

  NetworkSpec net;
  try {
    net.input_shape = shape_from_json(manifest.at("input_shape"));
    for (const json& jl : manifest.at("layers")) {
      std::string kind = jl.at("kind").get<std::string>();
      int input = jl.value("input", -1);
      if (kind == "linear") {
        LinearLayer lin;
        if (jl.contains("quant")) {
          lin.quant = quant_from_json(jl.at("quant"), blob);
          lin.weight = reconstruct_from_quant(*lin.quant);
          if (lin.weight.rows() != jl.at("d_in").get<Eigen::Index>() ||
              lin.weight.cols() != jl.at("d_out").get<Eigen::Index>())
            throw ShapeInconsistent(path + ": quantized linear dims mismatch");
        } else {
          lin.weight = blob.matrix(jl.at("weight"));
        }
        if (jl.contains("bias")) lin.bias = blob.vector(jl.at("bias"));
        Layer l = make_linear(std::move(lin.weight), std::move(lin.bias), input);
        l.as<LinearLayer>().quant = std::move(lin.quant);
        net.push(std::move(l));
      } else if (kind == "conv2d") {
        Conv2dLayer cv;
        cv.in_ch = jl.at("in_ch").get<int>();
        cv.out_ch = jl.at("out_ch").get<int>();
        cv.kh = jl.at("kh").get<int>();
        cv.kw = jl.at("kw").get<int>();
        cv.stride = jl.at("stride").get<int>();
        cv.pad = jl.at("pad").get<int>();
        if (jl.contains("quant")) {
          cv.quant = quant_from_json(jl.at("quant"), blob);
          cv.weight = reconstruct_from_quant(*cv.quant);
        } else {
          cv.weight = blob.matrix(jl.at("weight"));
        }
        if (cv.weight.rows() != cv.patch_len() || cv.weight.cols() != cv.out_ch)
          throw ShapeInconsistent(path + ": conv weight dims mismatch");
        if (jl.contains("bias")) cv.bias = blob.vector(jl.at("bias"));
        Layer l;
        l.kind = LayerKind::Conv2d;
        l.input = input;
        l.data = std::move(cv);
        net.push(std::move(l));
      } else if (kind == "batchnorm") {
        net.push(make_batchnorm(blob.vector(jl.at("gamma")),
                                blob.vector(jl.at("beta")),
                                blob.vector(jl.at("mean")),
                                blob.vector(jl.at("var")),
                                jl.at("eps").get<double>(), input));
      } else if (kind == "lif") {
        net.push(make_lif(tau_from_json(jl.at("tau_m")),
                          jl.at("v_th").get<double>(), input));
      } else if (kind == "flatten") {
        net.push(make_flatten(input));
      } else if (kind == "pool") {
        net.push(make_pool(jl.at("k").get<int>(), jl.at("stride").get<int>(),
                           input));
      } else if (kind == "add") {
        std::string mode = jl.at("mode").get<std::string>();
        if (mode != "concat" && mode != "ignore")
          throw CorruptPayload(path + ": unknown add mode " + mode);
        net.push(make_add(jl.at("lhs").get<int>(), jl.at("rhs").get<int>(),
                          mode == "concat" ? ShortcutMode::Concat
                                           : ShortcutMode::Ignore));
      } else {
        throw CorruptPayload(path + ": unknown layer kind " + kind);
      }
    }
  } catch (const json::exception& e) {
    throw CorruptPayload(path + ": manifest field error: " + e.what());
  }
  compute_geometry(net);  // structural validation
  return net;
}

// ---------------------------------------------------------------------------
// Calibration files
// ---------------------------------------------------------------------------

void CalibData::validate() const {
  if (timesteps < 1) throw ShapeInconsistent("calib: timesteps must be >= 1");
  if (shape.features() < 1) throw ShapeInconsistent("calib: empty shape");
  if (!labels.empty() && labels.size() != samples.size())
    throw ShapeInconsistent("calib: label count differs from sample count");
  for (const Matrix& s : samples) {
    if (s.rows() != timesteps || s.cols() != shape.features())
      throw ShapeInconsistent("calib: sample dims differ from header");
    if (!real_encoding) {
      for (Eigen::Index j = 0; j < s.cols(); ++j)
        for (Eigen::Index i = 0; i < s.rows(); ++i)
          if (s(i, j) != 0.0 && s(i, j) != 1.0)
            throw ShapeInconsistent("calib: spike sample contains non-binary value");
    } else {
      if (!s.allFinite())
        throw ShapeInconsistent("calib: non-finite sample value");
    }
  }
}

void save_calib(const std::string& path, const CalibData& data) {
  data.validate();
  json manifest;
  manifest["version"] = kFormatVersion;
  manifest["samples"] = data.samples.size();
  manifest["timesteps"] = data.timesteps;
  manifest["shape"] = shape_to_json(data.shape);
  manifest["encoding"] = data.real_encoding ? "real" : "spike";
  manifest["labels"] = !data.labels.empty();

  const int f = data.features();
  std::string payload;
  if (data.real_encoding) {
    payload.reserve(data.samples.size() * data.timesteps * f * 4);
    for (const Matrix& s : data.samples)
      for (int t = 0; t < data.timesteps; ++t)
        for (int j = 0; j < f; ++j)
          put_f32(payload, static_cast<float>(s(t, j)));
  } else {
    const std::size_t bytes_per_sample = (static_cast<std::size_t>(data.timesteps) * f + 7) / 8;
    payload.assign(bytes_per_sample * data.samples.size(), '\0');
    for (std::size_t n = 0; n < data.samples.size(); ++n) {
      const Matrix& s = data.samples[n];
      char* base = payload.data() + n * bytes_per_sample;
      for (int t = 0; t < data.timesteps; ++t)
        for (int j = 0; j < f; ++j)
          if (s(t, j) == 1.0) {
            std::size_t bit = static_cast<std::size_t>(t) * f + j;
            base[bit / 8] |= static_cast<char>(1u << (bit % 8));
          }
    }
  }

  std::string out;
  out += "SNNC";
  put_u32(out, kFormatVersion);
  std::string mtext = manifest.dump();
  put_u64(out, mtext.size());
  out += mtext;
  put_u64(out, payload.size());
  out += payload;
  std::string labels;
  for (int l : data.labels) put_i32(labels, l);
  put_u64(out, labels.size());
  out += labels;
  write_file(path, out);
}

CalibData load_calib(const std::string& path) {
  std::string data = read_file(path);
  Reader r(data, path);
  r.expect_magic("SNNC");
  std::uint32_t version = r.u32();
  if (version != kFormatVersion)
    throw VersionMismatch(path + ": calib format version " +
                          std::to_string(version));
  std::string mtext = r.bytes(r.u64());
  std::string payload = r.bytes(r.u64());
  std::string labels_bytes = r.bytes(r.u64());
  r.expect_end();

  json manifest;
  try {
    manifest = json::parse(mtext);
  } catch (const json::parse_error& e) {
    throw CorruptPayload(path + ": manifest parse error: " + e.what());
  }

  CalibData out;
  std::size_t n_samples = 0;
  bool has_labels = false;
  try {
    n_samples = manifest.at("samples").get<std::size_t>();
    out.timesteps = manifest.at("timesteps").get<int>();
    out.shape = shape_from_json(manifest.at("shape"));
    std::string enc = manifest.at("encoding").get<std::string>();
    if (enc != "spike" && enc != "real")
      throw CorruptPayload(path + ": unknown encoding " + enc);
    out.real_encoding = enc == "real";
    has_labels = manifest.at("labels").get<bool>();
  } catch (const json::exception& e) {
    throw CorruptPayload(path + ": manifest field error: " + e.what());
  }
  if (out.timesteps < 1) throw ShapeInconsistent(path + ": timesteps < 1");

  const int f = out.features();
  out.samples.reserve(n_samples);
  if (out.real_encoding) {
    std::size_t expect = n_samples * static_cast<std::size_t>(out.timesteps) * f * 4;
    if (payload.size() != expect)
      throw CorruptPayload(path + ": payload length mismatch");
    std::size_t p = 0;
    for (std::size_t n = 0; n < n_samples; ++n) {
      Matrix s(out.timesteps, f);
      for (int t = 0; t < out.timesteps; ++t)
        for (int j = 0; j < f; ++j) {
          std::uint32_t bits = 0;
          for (int b = 0; b < 4; ++b)
            bits |= static_cast<std::uint32_t>(
                        static_cast<unsigned char>(payload[p + b]))
                    << (8 * b);
          p += 4;
          double v = static_cast<double>(f32_from_bits(bits));
          if (!std::isfinite(v))
            throw CorruptPayload(path + ": non-finite sample value");
          s(t, j) = v;
        }
      out.samples.push_back(std::move(s));
    }
  } else {
    const std::size_t bits_per_sample = static_cast<std::size_t>(out.timesteps) * f;
    const std::size_t bytes_per_sample = (bits_per_sample + 7) / 8;
    if (payload.size() != bytes_per_sample * n_samples)
      throw CorruptPayload(path + ": payload length mismatch");
    for (std::size_t n = 0; n < n_samples; ++n) {
      const char* base = payload.data() + n * bytes_per_sample;
      Matrix s(out.timesteps, f);
      for (int t = 0; t < out.timesteps; ++t)
        for (int j = 0; j < f; ++j) {
          std::size_t bit = static_cast<std::size_t>(t) * f + j;
          s(t, j) = (static_cast<unsigned char>(base[bit / 8]) >> (bit % 8)) & 1u
                        ? 1.0
                        : 0.0;
        }
      // Padding bits beyond the sample's data must stay clear.
      for (std::size_t bit = bits_per_sample; bit < bytes_per_sample * 8; ++bit)
        if ((static_cast<unsigned char>(base[bit / 8]) >> (bit % 8)) & 1u)
          throw CorruptPayload(path + ": nonzero padding bit");
      out.samples.push_back(std::move(s));
    }
  }

  if (has_labels) {
    if (labels_bytes.size() != 4 * n_samples)
      throw CorruptPayload(path + ": label section length mismatch");
    out.labels.reserve(n_samples);
    for (std::size_t n = 0; n < n_samples; ++n) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b)
        bits |= static_cast<std::uint32_t>(
                    static_cast<unsigned char>(labels_bytes[4 * n + b]))
                << (8 * b);
      out.labels.push_back(static_cast<std::int32_t>(bits));
    }
  } else if (!labels_bytes.empty()) {
    throw CorruptPayload(path + ": unexpected label section");
  }
  out.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Mask files
// ---------------------------------------------------------------------------

void save_masks(const std::string& path, const std::vector<MaskMatrix>& masks) {
  json manifest;
  manifest["version"] = kFormatVersion;
  json mods = json::array();
  std::string payload;
  for (std::size_t m = 0; m < masks.size(); ++m) {
    const MaskMatrix& mask = masks[m];
    mods.push_back(json{{"index", m},
                        {"d_in", mask.rows()},
                        {"d_out", mask.cols()}});
    const std::size_t bits = static_cast<std::size_t>(mask.rows()) * mask.cols();
    std::string packed((bits + 7) / 8, '\0');
    for (Eigen::Index i = 0; i < mask.rows(); ++i)
      for (Eigen::Index j = 0; j < mask.cols(); ++j) {
        if (mask(i, j) == 0) continue;
        std::size_t bit = static_cast<std::size_t>(i) * mask.cols() + j;
        packed[bit / 8] |= static_cast<char>(1u << (bit % 8));
      }
    payload += packed;
  }
  manifest["modules"] = std::move(mods);

  std::string out;
  out += "SNNK";
  put_u32(out, kFormatVersion);
  std::string mtext = manifest.dump();
  put_u64(out, mtext.size());
  out += mtext;
  put_u64(out, payload.size());
  out += payload;
  write_file(path, out);
}

std::vector<MaskMatrix> load_masks(const std::string& path) {
  std::string data = read_file(path);
  Reader r(data, path);
  r.expect_magic("SNNK");
  std::uint32_t version = r.u32();
  if (version != kFormatVersion)
    throw VersionMismatch(path + ": mask format version " +
                          std::to_string(version));
  std::string mtext = r.bytes(r.u64());
  std::string payload = r.bytes(r.u64());
  r.expect_end();
  json manifest;
  try {
    manifest = json::parse(mtext);
  } catch (const json::parse_error& e) {
    throw CorruptPayload(path + ": manifest parse error: " + e.what());
  }
  std::vector<MaskMatrix> masks;
  std::size_t p = 0;
  try {
    for (const json& jm : manifest.at("modules")) {
      Eigen::Index rows = jm.at("d_in").get<Eigen::Index>();
      Eigen::Index cols = jm.at("d_out").get<Eigen::Index>();
      if (rows < 0 || cols < 0) throw ShapeInconsistent(path + ": negative dims");
      const std::size_t bits = static_cast<std::size_t>(rows) * cols;
      const std::size_t bytes = (bits + 7) / 8;
      if (p + bytes > payload.size())
        throw CorruptPayload(path + ": mask payload truncated");
      MaskMatrix mask(rows, cols);
      for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) {
          std::size_t bit = static_cast<std::size_t>(i) * cols + j;
          mask(i, j) = (static_cast<unsigned char>(payload[p + bit / 8]) >>
                        (bit % 8)) &
                       1u;
        }
      p += bytes;
      masks.push_back(std::move(mask));
    }
  } catch (const json::exception& e) {
    throw CorruptPayload(path + ": manifest field error: " + e.what());
  }
  if (p != payload.size())
    throw CorruptPayload(path + ": mask payload length mismatch");
  return masks;
}

// ---------------------------------------------------------------------------
// Teacher task
// ---------------------------------------------------------------------------

namespace {

Matrix bernoulli_sample(Rng& rng, int t_steps, int features, double rate) {
  Matrix s(t_steps, features);
  for (int t = 0; t < t_steps; ++t)
    for (int j = 0; j < features; ++j) s(t, j) = rng.bernoulli(rate);
  return s;
}

double mean_rate(const Matrix& spikes) {
  return spikes.sum() / static_cast<double>(spikes.size());
}

}  // namespace

TeacherTask gen_teacher_task(const TeacherOptions& opt) {
  if (opt.classes < 2) throw InvalidArgument("gen_teacher_task: classes < 2");
  if (opt.timesteps < 1) throw InvalidArgument("gen_teacher_task: timesteps < 1");
  if (opt.sizes.empty()) throw InvalidArgument("gen_teacher_task: empty sizes");
  for (int s : opt.sizes)
    if (s < 1) throw InvalidArgument("gen_teacher_task: non-positive layer size");
  if (opt.rate <= 0.0 || opt.rate > 1.0)
    throw InvalidArgument("gen_teacher_task: rate outside (0, 1]");
  if (opt.calib_samples < 1 || opt.test_samples < 0)
    throw InvalidArgument("gen_teacher_task: bad sample counts");

  Rng root(opt.seed);
  Rng probe_rng = root.fork(1);
  Rng weight_rng = root.fork(2);
  Rng calib_rng = root.fork(3);
  Rng test_rng = root.fork(4);

  std::vector<int> dims = opt.sizes;
  dims.push_back(opt.classes);
  const int d0 = dims[0];

  const int probe_count = 64;
  std::vector<Matrix> probe;
  probe.reserve(probe_count);
  for (int i = 0; i < probe_count; ++i)
    probe.push_back(bernoulli_sample(probe_rng, opt.timesteps, d0, opt.rate));

  NetworkSpec net;
  net.input_shape = TensorShape{d0, 1, 1};
  LIFParams lif{opt.tau_m, opt.v_th};
  lif.validate();

  TeacherTask task;
  std::vector<Matrix> layer_in = probe;  // probe activations feeding layer l
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const int d_in = dims[l];
    const int d_out = dims[l + 1];
    double in_rate = 0.0;
    for (const Matrix& x : layer_in) in_rate += mean_rate(x);
    in_rate = std::max(in_rate / layer_in.size(), 1e-3);
    // Current std is roughly scale * sqrt(d_in * in_rate); start near the
    // threshold and adapt multiplicatively.
    double scale = 1.5 * opt.v_th / std::sqrt(d_in * in_rate);
    Matrix accepted;
    double accepted_rate = -1.0;
    for (int attempt = 0; attempt < 100; ++attempt) {
      Matrix w(d_in, d_out);
      for (int i = 0; i < d_in; ++i)
        for (int j = 0; j < d_out; ++j) w(i, j) = weight_rng.normal() * scale;
      double rate_sum = 0.0;
      for (const Matrix& x : layer_in)
        rate_sum += mean_rate(lif_forward(x * w, lif).spikes);
      double rate = rate_sum / layer_in.size();
      if (rate >= 0.05 && rate <= 0.5) {
        accepted = std::move(w);
        accepted_rate = rate;
        break;
      }
      scale *= rate < 0.05 ? 1.6 : 0.55;
    }
    if (accepted_rate < 0.0)
      throw RateUnattainable("gen_teacher_task: layer " + std::to_string(l) +
                             " firing rate never reached [0.05, 0.5]");
    net.push(make_linear(accepted, Vector::Zero(d_out)));
    net.push(make_lif(opt.tau_m, opt.v_th));
    task.layer_rates.push_back(accepted_rate);
    for (Matrix& x : layer_in) x = lif_forward(x * accepted, lif).spikes;
  }

  auto make_set = [&](Rng& rng, int count) {
    CalibData d;
    d.timesteps = opt.timesteps;
    d.shape = TensorShape{d0, 1, 1};
    d.real_encoding = false;
    d.samples.reserve(count);
    d.labels.reserve(count);
    for (int i = 0; i < count; ++i) {
      Matrix s = bernoulli_sample(rng, opt.timesteps, d0, opt.rate);
      d.labels.push_back(predict_class(network_forward(net, s)));
      d.samples.push_back(std::move(s));
    }
    return d;
  };
  task.calib = make_set(calib_rng, opt.calib_samples);
  task.test = make_set(test_rng, opt.test_samples);
  task.model = std::move(net);
  return task;
}

}  // namespace sbc

#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "apnet/tensor.hpp"

namespace apnet {

// Checkpoint layout: <stem>.bin holds the raw parameter arrays back to
// back; <stem>.manifest is a text index (version tag, dtype, optional
// kernel-layout reference, one `param` line per array with name, shape,
// byte offset and byte length).
inline constexpr const char* kCheckpointVersion = "apnet-ckpt-1";

template <class S>
const char* dtype_name() {
  if constexpr (sizeof(S) == 4) return "f32";
  else return "f64";
}

template <class S>
void save_checkpoint(const std::string& stem,
                     const std::vector<std::pair<std::string, Value<S>>>& params,
                     const std::string& kernel_layout_ref = "") {
  std::ofstream bin(stem + ".bin", std::ios::binary);
  APNET_REQUIRE(bin.good(), "cannot open '", stem, ".bin' for writing");
  std::ofstream man(stem + ".manifest");
  APNET_REQUIRE(man.good(), "cannot open '", stem, ".manifest' for writing");

  man << kCheckpointVersion << '\n';
  man << "dtype " << dtype_name<S>() << '\n';
  if (!kernel_layout_ref.empty()) man << "kernel_layout " << kernel_layout_ref << '\n';

  std::uint64_t offset = 0;
  for (const auto& [name, value] : params) {
    APNET_REQUIRE(name.find(' ') == std::string::npos, "parameter name '", name,
                  "' must not contain spaces");
    const std::uint64_t bytes = std::uint64_t(value.numel()) * sizeof(S);
    man << "param " << name << ' ' << value.shape().size();
    for (std::size_t d : value.shape()) man << ' ' << d;
    man << ' ' << offset << ' ' << bytes << '\n';
    bin.write(reinterpret_cast<const char*>(value.data().data()), std::streamsize(bytes));
    offset += bytes;
  }
  bin.flush();
  man.flush();
  APNET_REQUIRE(bin.good() && man.good(), "checkpoint write to '", stem, "' failed");
}

template <class S>
struct LoadedCheckpoint {
  std::map<std::string, Value<S>> params;  // loaded as leaves with requires_grad=false
  std::string kernel_layout_ref;
};

template <class S>
LoadedCheckpoint<S> load_checkpoint(const std::string& stem) {
  std::ifstream man(stem + ".manifest");
  APNET_REQUIRE(man.good(), "cannot open '", stem, ".manifest' for reading");
  std::ifstream bin(stem + ".bin", std::ios::binary);
  APNET_REQUIRE(bin.good(), "cannot open '", stem, ".bin' for reading");

  std::string line;
  APNET_REQUIRE(std::getline(man, line), "checkpoint manifest is empty");
  APNET_REQUIRE(line == kCheckpointVersion, "checkpoint version '", line,
                "' does not match '", kCheckpointVersion, "'");

  LoadedCheckpoint<S> out;
  std::string seen_dtype;
  while (std::getline(man, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string tag;
    is >> tag;
    if (tag == "dtype") {
      is >> seen_dtype;
      APNET_REQUIRE(seen_dtype == dtype_name<S>(), "checkpoint dtype ", seen_dtype,
                    " does not match requested ", dtype_name<S>());
    } else if (tag == "kernel_layout") {
      is >> out.kernel_layout_ref;
    } else if (tag == "param") {
      std::string name;
      std::size_t ndims = 0;
      is >> name >> ndims;
      Shape shape(ndims);
      for (std::size_t d = 0; d < ndims; ++d) is >> shape[d];
      std::uint64_t offset = 0, bytes = 0;
      is >> offset >> bytes;
      APNET_REQUIRE(!is.fail(), "malformed manifest line: ", line);
      APNET_REQUIRE(bytes == shape_numel(shape) * sizeof(S),
                    "manifest byte length mismatch for '", name, "'");
      std::vector<S> data(shape_numel(shape));
      bin.seekg(std::streamoff(offset));
      bin.read(reinterpret_cast<char*>(data.data()), std::streamsize(bytes));
      APNET_REQUIRE(bin.gcount() == std::streamsize(bytes),
                    "checkpoint binary truncated while reading '", name, "'");
      out.params.emplace(name, Value<S>::leaf(shape, std::move(data), false));
    } else {
      throw Error(detail::format_msg("unknown manifest tag '", tag, "'"));
    }
  }
  APNET_REQUIRE(!seen_dtype.empty(), "checkpoint manifest lacks a dtype line");
  return out;
}

// Copies loaded arrays into live parameters, matching by name and shape.
template <class S>
void load_into(const LoadedCheckpoint<S>& ckpt,
               const std::vector<std::pair<std::string, Value<S>>>& params) {
  for (const auto& [name, value] : params) {
    const auto it = ckpt.params.find(name);
    APNET_REQUIRE(it != ckpt.params.end(), "checkpoint lacks parameter '", name, "'");
    APNET_REQUIRE(it->second.shape() == value.shape(), "checkpoint parameter '", name,
                  "' has shape ", shape_str(it->second.shape()), ", model expects ",
                  shape_str(value.shape()));
    Value<S> dst = value;
    dst.data() = it->second.data();
  }
}

}  // namespace apnet

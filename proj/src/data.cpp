#include "teata/data.hpp"

#include "teata/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

namespace teata {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string to_string(ClothingState s) { return s == ClothingState::SC ? "SC" : "CC"; }

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Query: return "query";
    case Split::Gallery: return "gallery";
  }
  return "?";
}

ClothingState parse_clothing_state(const std::string& text) {
  if (text == "SC") return ClothingState::SC;
  if (text == "CC") return ClothingState::CC;
  throw SchemaError("clothing_state must be \"SC\" or \"CC\", got \"" + text + "\"");
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::Train;
  if (text == "query") return Split::Query;
  if (text == "gallery") return Split::Gallery;
  throw SchemaError("unknown split \"" + text + "\"");
}

std::vector<std::size_t> DomainDataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].split == split) out.push_back(i);
  return out;
}

int DomainDataset::num_train_identities() const {
  std::set<int> ids;
  for (const auto& r : records)
    if (r.split == Split::Train) ids.insert(r.identity);
  return static_cast<int>(ids.size());
}

namespace {

template <typename T>
T get_field(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) throw SchemaError(where + ": missing key \"" + key + "\"");
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw SchemaError(where + ": key \"" + key + "\" has the wrong type");
  }
}

int get_non_negative(const json& obj, const char* key, const std::string& where) {
  const auto& v = obj.contains(key) ? obj.at(key) : json();
  if (!v.is_number_integer()) throw SchemaError(where + ": \"" + key + "\" must be an integer");
  const auto x = v.get<long long>();
  if (x < 0) throw SchemaError(where + ": \"" + key + "\" must be non-negative, got " + std::to_string(x));
  return static_cast<int>(x);
}

}  // namespace

DomainDataset load_domain(const fs::path& root) {
  const fs::path meta_path = root / "meta.json";
  const fs::path manifest_path = root / "manifest.jsonl";
  if (!fs::exists(meta_path)) throw MissingFile(meta_path.string());
  if (!fs::exists(manifest_path)) throw MissingFile(manifest_path.string());

  DomainDataset ds;
  ds.root = root;
  {
    std::ifstream in(meta_path);
    json meta;
    try {
      meta = json::parse(in);
    } catch (const json::exception& e) {
      throw SchemaError(meta_path.string() + ": " + e.what());
    }
    const std::string where = meta_path.string();
    ds.name = get_field<std::string>(meta, "name", where);
    ds.clothing_state = parse_clothing_state(get_field<std::string>(meta, "clothing_state", where));
    ds.num_identities = get_non_negative(meta, "num_identities", where);
    ds.image_height = get_non_negative(meta, "image_height", where);
    ds.image_width = get_non_negative(meta, "image_width", where);
    if (ds.num_identities <= 0 || ds.image_height <= 0 || ds.image_width <= 0)
      throw SchemaError(where + ": num_identities and image size must be positive");
  }

  std::ifstream in(manifest_path);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = manifest_path.string() + ":" + std::to_string(line_no);
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::exception& e) {
      throw SchemaError(where + ": " + e.what());
    }
    SampleRecord r;
    r.image_path = get_field<std::string>(obj, "image_path", where);
    r.identity = get_non_negative(obj, "identity", where);
    r.camera = get_non_negative(obj, "camera", where);
    r.clothing_id = get_non_negative(obj, "clothing_id", where);
    r.split = parse_split(get_field<std::string>(obj, "split", where));
    if (!fs::exists(root / r.image_path)) throw MissingFile("image " + (root / r.image_path).string());
    ds.records.push_back(std::move(r));
  }
  if (ds.records.empty()) throw SchemaError(manifest_path.string() + ": no records");

  // Relabel: train identities first (ascending), then test-only identities.
  std::set<int> train_ids, all_ids;
  for (const auto& r : ds.records) {
    all_ids.insert(r.identity);
    if (r.split == Split::Train) train_ids.insert(r.identity);
  }
  std::map<int, int> relabel;
  for (int id : train_ids) relabel.emplace(id, static_cast<int>(relabel.size()));
  for (int id : all_ids) relabel.emplace(id, static_cast<int>(relabel.size()));
  if (static_cast<int>(all_ids.size()) != ds.num_identities)
    throw SchemaError(meta_path.string() + ": num_identities=" + std::to_string(ds.num_identities) + " but manifest has " +
                      std::to_string(all_ids.size()) + " identities");
  for (auto& r : ds.records) r.identity = relabel.at(r.identity);

  // Clothing protocol.
  std::map<int, std::set<int>> outfits;
  for (const auto& r : ds.records) outfits[r.identity].insert(r.clothing_id);
  if (ds.clothing_state == ClothingState::SC) {
    for (const auto& [id, set] : outfits)
      if (set.size() > 1)
        throw ProtocolError(ds.name + ": SC domain but identity " + std::to_string(id) + " has " +
                            std::to_string(set.size()) + " clothing ids");
  } else {
    const bool any_change =
        std::any_of(outfits.begin(), outfits.end(), [](const auto& kv) { return kv.second.size() >= 2; });
    if (!any_change) throw ProtocolError(ds.name + ": CC domain but no identity changes clothes");
  }

  std::set<int> gallery_ids;
  for (const auto& r : ds.records)
    if (r.split == Split::Gallery) gallery_ids.insert(r.identity);
  for (const auto& r : ds.records)
    if (r.split == Split::Query && !gallery_ids.count(r.identity))
      throw ProtocolError(ds.name + ": query identity without gallery images (" + r.image_path + ")");
  return ds;
}

void write_domain_metadata(const DomainDataset& ds) {
  fs::create_directories(ds.root);
  json meta;
  meta["name"] = ds.name;
  meta["clothing_state"] = to_string(ds.clothing_state);
  meta["num_identities"] = ds.num_identities;
  meta["image_height"] = ds.image_height;
  meta["image_width"] = ds.image_width;
  {
    std::ofstream out(ds.root / "meta.json", std::ios::binary);
    if (!out) throw IOError("cannot write " + (ds.root / "meta.json").string());
    out << meta.dump(2) << "\n";
  }
  std::ofstream out(ds.root / "manifest.jsonl", std::ios::binary);
  if (!out) throw IOError("cannot write " + (ds.root / "manifest.jsonl").string());
  for (const auto& r : ds.records) {
    json obj;
    obj["image_path"] = r.image_path;
    obj["identity"] = r.identity;
    obj["camera"] = r.camera;
    obj["clothing_id"] = r.clothing_id;
    obj["split"] = to_string(r.split);
    out << obj.dump() << "\n";
  }
}

namespace {

using Color = std::array<double, 3>;

Color random_color(Rng& rng) {
  std::uniform_real_distribution<double> u(0.05, 0.95);
  return {u(rng), u(rng), u(rng)};
}

struct Canvas {
  int height;
  int width;
  std::vector<double> rgb;

  void fill(int y0, int y1, int x0, int x1, const Color& c) {
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x)
        for (int ch = 0; ch < 3; ++ch) rgb[(static_cast<std::size_t>(y) * width + x) * 3 + ch] = c[ch];
  }
};

// Identity "body": a block grid over the upper half.
struct BodyPattern {
  static constexpr int kRows = 4;
  static constexpr int kCols = 4;
  std::array<Color, kRows * kCols> blocks;
};

// Outfit: torso and legs colors plus a stripe color on the torso.
struct Outfit {
  Color torso;
  Color legs;
  Color stripe;
};

struct CameraTint {
  Color gain;
  Color offset;
};

void render(Canvas& canvas, const BodyPattern& body, const Outfit& outfit) {
  const int h = canvas.height, w = canvas.width;
  const int half = h / 2;
  for (int r = 0; r < BodyPattern::kRows; ++r)
    for (int c = 0; c < BodyPattern::kCols; ++c)
      canvas.fill(r * half / BodyPattern::kRows, (r + 1) * half / BodyPattern::kRows, c * w / BodyPattern::kCols,
                  (c + 1) * w / BodyPattern::kCols, body.blocks[static_cast<std::size_t>(r * BodyPattern::kCols + c)]);
  const int legs_start = half + h / 4;
  canvas.fill(half, legs_start, 0, w, outfit.torso);
  const int stripe = std::max(1, h / 32);
  for (int y = half + stripe; y < legs_start; y += 3 * stripe) canvas.fill(y, std::min(y + stripe, legs_start), 0, w, outfit.stripe);
  canvas.fill(legs_start, h, 0, w, outfit.legs);
}

}  // namespace

DomainDataset generate_synthetic_domain(const GeneratorParams& p, const fs::path& root) {
  if (p.num_identities < 2) throw InvalidArgument("generate_synthetic_domain: need at least 2 identities");
  if (p.images_per_identity < 3)
    throw InvalidArgument("generate_synthetic_domain: need at least 3 images per identity for train/query/gallery");
  if (p.num_cameras < 2) throw InvalidArgument("generate_synthetic_domain: need at least 2 cameras");
  if (p.image_height < 8 || p.image_width < 4 || p.image_height % 8 != 0 || p.image_width % 4 != 0)
    throw InvalidArgument("generate_synthetic_domain: image size must be multiples of 8x4");
  if (!(p.noise_std >= 0.0)) throw InvalidArgument("generate_synthetic_domain: noise_std must be non-negative");

  Rng rng(derive_seed(p.seed, {0xda7a}));
  const bool cc = p.clothing_state == ClothingState::CC;
  const int outfits_per_id = cc ? (p.images_per_identity >= 6 ? 3 : 2) : 1;

  std::vector<CameraTint> tints(static_cast<std::size_t>(p.num_cameras));
  {
    std::uniform_real_distribution<double> gain(0.7, 1.3), offset(-0.08, 0.08);
    for (auto& t : tints) {
      for (auto& g : t.gain) g = gain(rng);
      for (auto& o : t.offset) o = offset(rng);
    }
  }

  DomainDataset ds;
  ds.name = p.name;
  ds.clothing_state = p.clothing_state;
  ds.num_identities = p.num_identities;
  ds.image_height = p.image_height;
  ds.image_width = p.image_width;
  ds.root = root;
  fs::create_directories(root / "images");

  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_int_distribution<int> any_camera(0, p.num_cameras - 1);
  Canvas canvas{p.image_height, p.image_width, std::vector<double>(static_cast<std::size_t>(p.image_height) * p.image_width * 3)};
  std::vector<std::uint8_t> bytes(canvas.rgb.size());

  for (int id = 0; id < p.num_identities; ++id) {
    BodyPattern body;
    for (auto& b : body.blocks) b = random_color(rng);
    std::vector<Outfit> outfits(static_cast<std::size_t>(outfits_per_id));
    for (auto& o : outfits) o = {random_color(rng), random_color(rng), random_color(rng)};

    const int n = p.images_per_identity;
    const int n_train = n / 2;
    const int n_test = n - n_train;
    const int n_query = std::max(1, n_test / 2);
    const int cam_base = any_camera(rng);

    for (int k = 0; k < n; ++k) {
      SampleRecord r;
      r.identity = id;
      int outfit = 0;
      if (k < n_train) {
        r.split = Split::Train;
        r.camera = any_camera(rng);
        outfit = k % outfits_per_id;
      } else if (k < n_train + n_query) {
        const int q = k - n_train;
        r.split = Split::Query;
        r.camera = (cam_base + 2 * q) % p.num_cameras;
        outfit = q % outfits_per_id;
      } else {
        // Gallery image g pairs with query g % n_query on a different camera and outfit.
        const int g = k - n_train - n_query;
        const int q = g % n_query;
        r.split = Split::Gallery;
        r.camera = ((cam_base + 2 * q) % p.num_cameras + 1) % p.num_cameras;
        outfit = (q % outfits_per_id + (cc ? 1 : 0)) % outfits_per_id;
      }
      r.clothing_id = id * outfits_per_id + outfit;
      char name[64];
      std::snprintf(name, sizeof(name), "images/id%04d_%03d.png", id, k);
      r.image_path = name;

      render(canvas, body, outfits[static_cast<std::size_t>(outfit)]);
      const auto& tint = tints[static_cast<std::size_t>(r.camera)];
      for (std::size_t i = 0; i < canvas.rgb.size(); ++i) {
        const int ch = static_cast<int>(i % 3);
        double v = canvas.rgb[i] * tint.gain[ch] + tint.offset[ch] + p.noise_std * noise(rng);
        v = std::clamp(v, 0.0, 1.0);
        bytes[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
      write_png(root / r.image_path, p.image_height, p.image_width, bytes);
      ds.records.push_back(std::move(r));
    }
  }
  write_domain_metadata(ds);
  return load_domain(root);
}

DomainDataset merge_train_splits(std::span<const DomainDataset> domains, const std::string& name) {
  if (domains.empty()) throw InvalidArgument("merge_train_splits: no domains");
  DomainDataset merged;
  merged.name = name;
  merged.clothing_state = ClothingState::SC;
  merged.image_height = domains.front().image_height;
  merged.image_width = domains.front().image_width;
  int offset = 0;
  for (const auto& d : domains) {
    if (d.image_height != merged.image_height || d.image_width != merged.image_width)
      throw InvalidArgument("merge_train_splits: image sizes differ across domains");
    if (d.clothing_state == ClothingState::CC) merged.clothing_state = ClothingState::CC;
    const int n = d.num_train_identities();
    for (const auto& r : d.records) {
      if (r.split != Split::Train) continue;
      SampleRecord m = r;
      m.identity += offset;
      m.image_path = fs::absolute(d.root / r.image_path).string();
      merged.records.push_back(std::move(m));
    }
    offset += n;
  }
  merged.num_identities = offset;
  return merged;
}

void BatchSpec::validate() const {
  if (batch_size <= 0 || instances_per_identity <= 0)
    throw InvalidArgument("batch_size and instances_per_identity must be positive");
  if (batch_size % instances_per_identity != 0)
    throw InvalidArgument("batch_size must be a multiple of instances_per_identity");
}

std::vector<Batch> sample_pk_batches(const DomainDataset& dataset, const BatchSpec& spec, std::uint64_t seed,
                                     int epoch) {
  spec.validate();
  const int p = spec.identities_per_batch();
  const int k = spec.instances_per_identity;
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < dataset.records.size(); ++i)
    if (dataset.records[i].split == Split::Train) by_id[dataset.records[i].identity].push_back(i);
  if (static_cast<int>(by_id.size()) < p)
    throw InvalidArgument("PK sampler: " + std::to_string(by_id.size()) + " train identities, batch needs " +
                          std::to_string(p));

  Rng rng(derive_seed(seed, {0x9c, static_cast<std::uint64_t>(epoch)}));

  // Cut each identity's shuffled images into chunks of K, topping up the last
  // chunk with replacement draws from the same identity.
  auto make_chunk = [&](const std::vector<std::size_t>& pool) {
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    std::vector<std::size_t> c(static_cast<std::size_t>(k));
    for (auto& x : c) x = pool[pick(rng)];
    return c;
  };
  std::map<int, std::vector<std::vector<std::size_t>>> chunks;
  for (auto& [id, pool] : by_id) {
    std::vector<std::size_t> order = pool;
    std::shuffle(order.begin(), order.end(), rng);
    auto& list = chunks[id];
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(k)) {
      std::vector<std::size_t> c(order.begin() + static_cast<std::ptrdiff_t>(s),
                                 order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + k)));
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      while (static_cast<int>(c.size()) < k) c.push_back(pool[pick(rng)]);
      list.push_back(std::move(c));
    }
  }

  std::vector<int> all_ids;
  for (const auto& kv : by_id) all_ids.push_back(kv.first);

  std::vector<Batch> batches;
  while (true) {
    std::vector<int> pending;
    for (const auto& [id, list] : chunks)
      if (!list.empty()) pending.push_back(id);
    if (pending.empty()) break;
    std::shuffle(pending.begin(), pending.end(), rng);
    std::vector<int> chosen(pending.begin(), pending.begin() + std::min<std::ptrdiff_t>(p, static_cast<std::ptrdiff_t>(pending.size())));
    if (static_cast<int>(chosen.size()) < p) {
      // Fill with identities that have no chunks left this epoch.
      std::vector<int> others;
      for (int id : all_ids)
        if (std::find(chosen.begin(), chosen.end(), id) == chosen.end()) others.push_back(id);
      std::shuffle(others.begin(), others.end(), rng);
      chosen.insert(chosen.end(), others.begin(), others.begin() + (p - static_cast<int>(chosen.size())));
    }
    Batch b;
    for (int id : chosen) {
      auto& list = chunks[id];
      std::vector<std::size_t> c;
      if (!list.empty()) {
        c = std::move(list.back());
        list.pop_back();
      } else {
        c = make_chunk(by_id[id]);
      }
      for (auto idx : c) {
        b.record_indices.push_back(idx);
        b.labels.push_back(id);
      }
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

void AccessAuditor::record(const std::string& domain, Split split, std::size_t count) {
  reads_[{domain, split}] += count;
  if (split == Split::Train && is_closed(domain)) {
    violations_ += count;
    if (strict_) throw DataLeakError("train split of completed domain \"" + domain + "\" was read");
  }
}

std::size_t AccessAuditor::reads(const std::string& domain, Split split) const {
  auto it = reads_.find({domain, split});
  return it == reads_.end() ? 0 : it->second;
}

ImageBatch ImageSource::load(const DomainDataset& dataset, std::span<const std::size_t> record_indices) {
  if (auditor_) {
    std::map<Split, std::size_t> counts;
    for (auto i : record_indices) counts[dataset.records.at(i).split] += 1;
    for (const auto& [split, n] : counts) auditor_->record(dataset.name, split, n);
  }
  const Eigen::Index dim = static_cast<Eigen::Index>(dataset.image_height) * dataset.image_width * 3;
  ImageBatch batch{dataset.image_height, dataset.image_width, Matrix(static_cast<Eigen::Index>(record_indices.size()), dim)};
  auto& cache = cache_[dataset.root.string() + "|" + dataset.name + "|" + std::to_string(dataset.records.size())];
  cache.resize(dataset.records.size());
  for (std::size_t i = 0; i < record_indices.size(); ++i) {
    const std::size_t idx = record_indices[i];
    auto& slot = cache.at(idx);
    if (!slot) {
      int h = 0, w = 0;
      const auto bytes = read_png(dataset.root / dataset.records[idx].image_path, h, w);
      if (h != dataset.image_height || w != dataset.image_width)
        throw SchemaError("image " + dataset.records[idx].image_path + " has size " + std::to_string(h) + "x" +
                          std::to_string(w));
      RowVector v(dim);
      for (Eigen::Index j = 0; j < dim; ++j) v(j) = bytes[static_cast<std::size_t>(j)] / 255.0;
      slot = std::move(v);
    }
    batch.pixels.row(static_cast<Eigen::Index>(i)) = *slot;
  }
  return batch;
}

void augment(ImageBatch& batch, const AugmentConfig& config, Rng& rng) {
  if (!config.enabled) return;
  const int h = static_cast<int>(batch.height), w = static_cast<int>(batch.width);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (Eigen::Index b = 0; b < batch.count(); ++b) {
    auto px = [&](RowVector& img, int y, int x, int c) -> double& {
      return img(static_cast<Eigen::Index>((y * w + x) * 3 + c));
    };
    RowVector img = batch.pixels.row(b);
    if (u(rng) < config.flip_probability) {
      RowVector flipped = img;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          for (int c = 0; c < 3; ++c) px(flipped, y, x, c) = px(img, y, w - 1 - x, c);
      img = flipped;
    }
    if (config.padding > 0) {
      std::uniform_int_distribution<int> shift(-config.padding, config.padding);
      const int dy = shift(rng), dx = shift(rng);
      RowVector moved = RowVector::Zero(img.size());
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const int sy = y + dy, sx = x + dx;
          if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
          for (int c = 0; c < 3; ++c) px(moved, y, x, c) = px(img, sy, sx, c);
        }
      img = moved;
    }
    if (u(rng) < config.erase_probability) {
      const double area = h * w * (0.02 + u(rng) * 0.38);
      const double aspect = std::exp(std::log(0.3) + u(rng) * (std::log(3.3) - std::log(0.3)));
      const int eh = std::min(h, static_cast<int>(std::round(std::sqrt(area * aspect))));
      const int ew = std::min(w, static_cast<int>(std::round(std::sqrt(area / aspect))));
      if (eh > 0 && ew > 0) {
        std::uniform_int_distribution<int> oy(0, h - eh), ox(0, w - ew);
        const int y0 = oy(rng), x0 = ox(rng);
        for (int y = y0; y < y0 + eh; ++y)
          for (int x = x0; x < x0 + ew; ++x)
            for (int c = 0; c < 3; ++c) px(img, y, x, c) = u(rng);
      }
    }
    batch.pixels.row(b) = img;
  }
}

}  // namespace teata

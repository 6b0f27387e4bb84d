#pragma once

namespace maslora {

// Vocabulary layout shared by the model and the corpus generator.
constexpr int kPadId = 0;
constexpr int kBosId = 1;
constexpr int kEosId = 2;
constexpr int kFirstWordId = 3;

}  // namespace maslora

#pragma once

#include "mvpose/association.hpp"
#include "mvpose/ba.hpp"
#include "mvpose/camera.hpp"
#include "mvpose/error.hpp"
#include "mvpose/eval.hpp"
#include "mvpose/imu.hpp"
#include "mvpose/io.hpp"
#include "mvpose/liegroups.hpp"
#include "mvpose/log.hpp"
#include "mvpose/pipeline.hpp"
#include "mvpose/posegraph.hpp"
#include "mvpose/registration.hpp"
#include "mvpose/sequence.hpp"
#include "mvpose/synth.hpp"

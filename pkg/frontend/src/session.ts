// Round-by-round session state machine.
//
// Lifecycle per round: fetch payload -> preload all images -> timer starts
// -> exactly one selection -> confirm -> POST guess -> locked (+ feedback
// when the session has it enabled). After submitting round i the payload
// and images for round i+1 are prefetched so the next timer is honest.

import { ApiClient, ApiError, GuessResponse, RoundPayload } from "./api.js";

export type Phase = "loading" | "choosing" | "submitting" | "answered" | "done";

export interface RoundState {
  payload: RoundPayload;
  selected: number | null;
  startedAt: number;
  result: GuessResponse | null;
}

export type ImageLoader = (urls: string[]) => Promise<void>;
export type Clock = () => number;

// Default preloader: fetch every image once so the HTTP cache is warm
// before the round timer starts.
export async function fetchPreloader(urls: string[]): Promise<void> {
  await Promise.all(
    urls.map(async (url) => {
      const resp = await fetch(url);
      if (!resp.ok) throw new ApiError(resp.status, `image ${url}`);
      await resp.arrayBuffer();
    }),
  );
}

export class SessionPlayer {
  api: ApiClient;
  token: string;
  phase: Phase = "loading";
  round: RoundState | null = null;
  private loader: ImageLoader;
  private clock: Clock;
  private prefetched: RoundPayload | null = null;

  constructor(
    api: ApiClient,
    token: string,
    loader: ImageLoader = fetchPreloader,
    clock: Clock = () => Date.now(),
  ) {
    this.api = api;
    this.token = token;
    this.loader = loader;
    this.clock = clock;
  }

  get complete(): boolean {
    return this.phase === "done";
  }

  private allImageUrls(payload: RoundPayload): string[] {
    return [payload.sketch_url, ...payload.candidates].map((u) =>
      this.api.imageUrl(u),
    );
  }

  // Fetch (or adopt the prefetched) round and start its timer once every
  // image has finished loading.
  async loadRound(index: number): Promise<RoundState> {
    this.phase = "loading";
    let payload: RoundPayload;
    if (this.prefetched && this.prefetched.index === index) {
      payload = this.prefetched;
    } else {
      payload = await this.api.getRound(this.token, index);
      await this.loader(this.allImageUrls(payload));
    }
    this.prefetched = null;
    this.round = {
      payload,
      selected: null,
      startedAt: this.clock(),
      result: null,
    };
    this.phase = "choosing";
    return this.round;
  }

  select(candidate: number): void {
    if (this.phase !== "choosing" || !this.round) {
      throw new Error("no selectable round");
    }
    const n = this.round.payload.candidates.length;
    if (candidate < 0 || candidate >= n) {
      throw new Error(`candidate ${candidate} out of range`);
    }
    this.round.selected = candidate;
  }

  // Submit the single selection; resolves with the server response and
  // locks the round. Retries on network failure are safe because the
  // server rejects duplicates without changing the stored record.
  async confirm(): Promise<GuessResponse> {
    if (this.phase !== "choosing" || !this.round) {
      throw new Error("nothing to confirm");
    }
    if (this.round.selected === null) {
      throw new Error("no candidate selected");
    }
    const elapsed = Math.max(1, this.clock() - this.round.startedAt);
    this.phase = "submitting";
    let result: GuessResponse;
    try {
      result = await this.api.submitGuess(
        this.token,
        this.round.payload.index,
        this.round.selected,
        elapsed,
      );
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        // already recorded (e.g. a retried request); treat as answered
        result = { accepted: true, feedback: null };
      } else {
        this.phase = "choosing";
        throw err;
      }
    }
    this.round.result = result;
    const { index, total } = this.round.payload;
    this.phase = index + 1 >= total ? "done" : "answered";
    if (this.phase === "answered") {
      void this.prefetchNext(index + 1);
    }
    return result;
  }

  private async prefetchNext(index: number): Promise<void> {
    try {
      const payload = await this.api.getRound(this.token, index);
      await this.loader(this.allImageUrls(payload));
      this.prefetched = payload;
    } catch {
      // prefetch is an optimization; loadRound will fetch on demand
      this.prefetched = null;
    }
  }
}
